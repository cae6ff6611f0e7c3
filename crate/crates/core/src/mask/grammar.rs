//! Policy-name grammar.
//!
//! ```text
//! name     := cameras ['-' proprio]
//! cameras  := camtok+          camtok  := ('A'|'S'|'W') ['_' ('L'|'R')]
//! proprio  := proptok+         proptok := ('P'|'V'|'T') ['_' TAG]
//! ```
//!
//! `TAG` is a single uppercase letter naming a channel group. A side or tag
//! binds to the letter immediately before the underscore.

use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CameraKind {
    Static,
    Wrist,
    Active,
}

impl CameraKind {
    pub fn letter(self) -> char {
        match self {
            CameraKind::Static => 'S',
            CameraKind::Wrist => 'W',
            CameraKind::Active => 'A',
        }
    }

    /// Infix used in stream names (`cam_<infix>_left`).
    pub fn stream_infix(self) -> &'static str {
        match self {
            CameraKind::Static => "static",
            CameraKind::Wrist => "wrist",
            CameraKind::Active => "active",
        }
    }

    fn from_letter(c: u8) -> Option<Self> {
        match c {
            b'S' => Some(CameraKind::Static),
            b'W' => Some(CameraKind::Wrist),
            b'A' => Some(CameraKind::Active),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Both,
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CameraToken {
    pub kind: CameraKind,
    pub side: Side,
}

impl CameraToken {
    pub fn new(kind: CameraKind, side: Side) -> Self {
        Self { kind, side }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProprioKind {
    Pressure,
    Velocity,
    Torque,
}

impl ProprioKind {
    pub fn letter(self) -> char {
        match self {
            ProprioKind::Pressure => 'P',
            ProprioKind::Velocity => 'V',
            ProprioKind::Torque => 'T',
        }
    }

    fn from_letter(c: u8) -> Option<Self> {
        match c {
            b'P' => Some(ProprioKind::Pressure),
            b'V' => Some(ProprioKind::Velocity),
            b'T' => Some(ProprioKind::Torque),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ProprioToken {
    pub kind: ProprioKind,
    pub tag: Option<char>,
}

impl ProprioToken {
    pub fn new(kind: ProprioKind, tag: Option<char>) -> Self {
        Self { kind, tag }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    Empty,
    NonAscii,
    UnknownLetter(char),
    DanglingUnderscore,
    InvalidSide(char),
    InvalidTag(char),
    EmptyCameraPart,
    EmptyProprioPart,
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid policy name at byte {pos}: {kind}")]
pub struct ParseError {
    pub pos: usize,
    pub kind: ParseErrorKind,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseErrorKind::Empty => write!(f, "empty name"),
            ParseErrorKind::NonAscii => write!(f, "non-ASCII character"),
            ParseErrorKind::UnknownLetter(c) => write!(f, "unexpected {c:?}"),
            ParseErrorKind::DanglingUnderscore => write!(f, "underscore without a side or tag"),
            ParseErrorKind::InvalidSide(c) => write!(f, "side must be L or R, got {c:?}"),
            ParseErrorKind::InvalidTag(c) => write!(f, "group tag must be an uppercase letter, got {c:?}"),
            ParseErrorKind::EmptyCameraPart => write!(f, "no camera before '-'"),
            ParseErrorKind::EmptyProprioPart => write!(f, "no proprioceptive token after '-'"),
            ParseErrorKind::Duplicate(t) => write!(f, "duplicate token {t}"),
        }
    }
}

/// Parsed policy name: selected cameras and proprioceptive extras.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PolicyName {
    pub cameras: Vec<CameraToken>,
    pub proprio: Vec<ProprioToken>,
}

impl PolicyName {
    /// Canonical token order: cameras S, W, A (unsided first), proprio P, V, T.
    pub fn normalize(&self) -> PolicyName {
        let mut cameras = self.cameras.clone();
        cameras.sort();
        cameras.dedup();
        let mut proprio = self.proprio.clone();
        proprio.sort();
        proprio.dedup();
        PolicyName { cameras, proprio }
    }

    /// Whether every token of `self` also appears in `other`.
    pub fn is_subset_of(&self, other: &PolicyName) -> bool {
        self.cameras.iter().all(|c| other.cameras.contains(c))
            && self.proprio.iter().all(|p| other.proprio.contains(p))
    }
}

fn err(pos: usize, kind: ParseErrorKind) -> ParseError {
    ParseError { pos, kind }
}

/// Parses a policy name such as `WA-P` or `S_LWA-PV_AT_A`.
pub fn parse_policy_name(text: &str) -> Result<PolicyName, ParseError> {
    if text.is_empty() {
        return Err(err(0, ParseErrorKind::Empty));
    }
    if let Some(pos) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(err(pos, ParseErrorKind::NonAscii));
    }
    let b = text.as_bytes();
    let mut pos = 0;

    // optional `_X` suffix; returns the byte after the underscore
    let suffix = |pos: &mut usize| -> Result<Option<(usize, u8)>, ParseError> {
        if *pos < b.len() && b[*pos] == b'_' {
            let at = *pos + 1;
            if at >= b.len() || b[at] == b'-' {
                return Err(err(*pos, ParseErrorKind::DanglingUnderscore));
            }
            *pos = at + 1;
            Ok(Some((at, b[at])))
        } else {
            Ok(None)
        }
    };

    let mut cameras = Vec::new();
    while pos < b.len() && b[pos] != b'-' {
        let start = pos;
        let kind = CameraKind::from_letter(b[pos])
            .ok_or_else(|| err(pos, ParseErrorKind::UnknownLetter(b[pos] as char)))?;
        pos += 1;
        let side = match suffix(&mut pos)? {
            None => Side::Both,
            Some((_, b'L')) => Side::Left,
            Some((_, b'R')) => Side::Right,
            Some((at, c)) => return Err(err(at, ParseErrorKind::InvalidSide(c as char))),
        };
        let tok = CameraToken::new(kind, side);
        if cameras.contains(&tok) {
            return Err(err(start, ParseErrorKind::Duplicate(text[start..pos].to_string())));
        }
        cameras.push(tok);
    }
    if cameras.is_empty() {
        return Err(err(pos, ParseErrorKind::EmptyCameraPart));
    }

    let mut proprio = Vec::new();
    if pos < b.len() {
        pos += 1; // '-'
        if pos == b.len() {
            return Err(err(pos, ParseErrorKind::EmptyProprioPart));
        }
        while pos < b.len() {
            let start = pos;
            let kind = ProprioKind::from_letter(b[pos])
                .ok_or_else(|| err(pos, ParseErrorKind::UnknownLetter(b[pos] as char)))?;
            pos += 1;
            let tag = match suffix(&mut pos)? {
                None => None,
                Some((_, c)) if c.is_ascii_uppercase() => Some(c as char),
                Some((at, c)) => return Err(err(at, ParseErrorKind::InvalidTag(c as char))),
            };
            let tok = ProprioToken::new(kind, tag);
            if proprio.contains(&tok) {
                return Err(err(start, ParseErrorKind::Duplicate(text[start..pos].to_string())));
            }
            proprio.push(tok);
        }
    }
    Ok(PolicyName { cameras, proprio })
}

/// Canonical text form; `parse(format(n)) == n.normalize()`.
pub fn format_policy_name(name: &PolicyName) -> String {
    let n = name.normalize();
    let mut out = String::new();
    for c in &n.cameras {
        out.push(c.kind.letter());
        match c.side {
            Side::Both => {}
            Side::Left => out.push_str("_L"),
            Side::Right => out.push_str("_R"),
        }
    }
    if !n.proprio.is_empty() {
        out.push('-');
        for p in &n.proprio {
            out.push(p.kind.letter());
            if let Some(t) = p.tag {
                out.push('_');
                out.push(t);
            }
        }
    }
    out
}

impl fmt::Display for PolicyName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_policy_name(self))
    }
}

impl FromStr for PolicyName {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_policy_name(s)
    }
}
