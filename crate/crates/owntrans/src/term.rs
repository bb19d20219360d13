//! Symbolic message terms: atoms, concatenations, and the two encryption
//! constructors, plus pattern matching and a canonical byte encoding.
//!
//! Everything the protocol sends, stores, or derives is a [`Term`]. Terms are
//! immutable values; cloning is cheap because children are reference-counted.

use std::collections::btree_map;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

/// The sort of an [`Atom`]. Sorts drive both construction rules (only public
/// keys may key an asymmetric encryption, only nonces a symmetric one) and
/// the typed enumeration of intruder messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AtomKind {
    AgentName,
    Password,
    Nonce,
    PublicKey,
    PrivateKey,
    Constant,
}

impl AtomKind {
    /// Stable one-byte tag used by [`canonical_encode`].
    fn tag(self) -> u8 {
        match self {
            AtomKind::AgentName => 0x01,
            AtomKind::Password => 0x02,
            AtomKind::Nonce => 0x03,
            AtomKind::PublicKey => 0x04,
            AtomKind::PrivateKey => 0x05,
            AtomKind::Constant => 0x06,
        }
    }

    fn from_tag(tag: u8) -> Option<AtomKind> {
        Some(match tag {
            0x01 => AtomKind::AgentName,
            0x02 => AtomKind::Password,
            0x03 => AtomKind::Nonce,
            0x04 => AtomKind::PublicKey,
            0x05 => AtomKind::PrivateKey,
            0x06 => AtomKind::Constant,
            _ => return None,
        })
    }

    /// Human-readable sort name, used in error messages.
    pub fn name(self) -> &'static str {
        match self {
            AtomKind::AgentName => "agent name",
            AtomKind::Password => "password",
            AtomKind::Nonce => "nonce",
            AtomKind::PublicKey => "public key",
            AtomKind::PrivateKey => "private key",
            AtomKind::Constant => "constant",
        }
    }
}

/// An indivisible named value: an agent name, password, nonce, key, or
/// protocol constant.
///
/// Key atoms are labeled by their owner (`PublicKey` with label `"CKS"`);
/// [`Atom::display_name`] adds the `P_`/`SK_` prefix so the pair is legible.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom {
    kind: AtomKind,
    label: String,
}

impl Atom {
    pub fn new(kind: AtomKind, label: impl Into<String>) -> Atom {
        Atom {
            kind,
            label: label.into(),
        }
    }

    pub fn kind(&self) -> AtomKind {
        self.kind
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// The name this atom goes by in scenario files and printed traces:
    /// the bare label, except keys which render as `P_<label>` / `SK_<label>`.
    pub fn display_name(&self) -> String {
        match self.kind {
            AtomKind::PublicKey => format!("P_{}", self.label),
            AtomKind::PrivateKey => format!("SK_{}", self.label),
            _ => self.label.clone(),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.display_name())
    }
}

/// Errors from term construction or decoding.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum TermError {
    #[error("key must be a public key, got {0}")]
    AsymmetricKeyKind(String),
    #[error("key must be a nonce, got {0}")]
    SymmetricKeyKind(String),
    #[error("{argument} must be a {expected}, got {actual}")]
    ArgumentKind {
        argument: &'static str,
        expected: &'static str,
        actual: String,
    },
    #[error("concatenation of zero terms")]
    EmptyConcat,
    #[error("encoding truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown constructor tag 0x{0:02x} at byte {1}")]
    BadConstructorTag(u8, usize),
    #[error("unknown atom kind tag 0x{0:02x} at byte {1}")]
    BadKindTag(u8, usize),
    #[error("atom label is not valid UTF-8")]
    BadLabel,
    #[error("{0} trailing bytes after a complete term")]
    TrailingBytes(usize),
}

/// A symbolic message.
///
/// `Pair` is binary; the protocol's n-ary concatenation `x ∥ y ∥ z` is the
/// right-nested `Pair(x, Pair(y, z))` built by [`Term::cat`]. `AEnc` is
/// asymmetric encryption (key must be a public-key atom); `SEnc` is symmetric
/// encryption (key must be a nonce atom — the protocol uses nonces as
/// session keys).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Atom(Atom),
    Pair(Arc<Term>, Arc<Term>),
    AEnc { key: Arc<Term>, body: Arc<Term> },
    SEnc { key: Arc<Term>, body: Arc<Term> },
}

impl Term {
    pub fn atom(kind: AtomKind, label: impl Into<String>) -> Term {
        Term::Atom(Atom::new(kind, label))
    }

    pub fn pair(left: Term, right: Term) -> Term {
        Term::Pair(Arc::new(left), Arc::new(right))
    }

    /// Right-nested concatenation: `cat([x, y, z])` = `Pair(x, Pair(y, z))`.
    pub fn cat(parts: Vec<Term>) -> Result<Term, TermError> {
        let mut iter = parts.into_iter().rev();
        let last = iter.next().ok_or(TermError::EmptyConcat)?;
        Ok(iter.fold(last, |acc, t| Term::pair(t, acc)))
    }

    /// Asymmetric encryption; the key must be a `PublicKey` atom.
    pub fn aenc(key: Term, body: Term) -> Result<Term, TermError> {
        if !key.is_atom_of(AtomKind::PublicKey) {
            return Err(TermError::AsymmetricKeyKind(key.to_string()));
        }
        Ok(Term::AEnc {
            key: Arc::new(key),
            body: Arc::new(body),
        })
    }

    /// Symmetric encryption; the key must be a `Nonce` atom.
    pub fn senc(key: Term, body: Term) -> Result<Term, TermError> {
        if !key.is_atom_of(AtomKind::Nonce) {
            return Err(TermError::SymmetricKeyKind(key.to_string()));
        }
        Ok(Term::SEnc {
            key: Arc::new(key),
            body: Arc::new(body),
        })
    }

    pub fn as_atom(&self) -> Option<&Atom> {
        match self {
            Term::Atom(a) => Some(a),
            _ => None,
        }
    }

    pub fn is_atom_of(&self, kind: AtomKind) -> bool {
        matches!(self, Term::Atom(a) if a.kind() == kind)
    }

    /// The term itself plus all transitive constituents, including the keys
    /// of encryptions. (Occurrence, not derivability: the secrecy check asks
    /// "does the claimed secret occur inside this message".)
    pub fn subterms(&self) -> BTreeSet<Term> {
        let mut out = BTreeSet::new();
        self.collect_subterms(&mut out);
        out
    }

    fn collect_subterms(&self, out: &mut BTreeSet<Term>) {
        if !out.insert(self.clone()) {
            return;
        }
        match self {
            Term::Atom(_) => {}
            Term::Pair(l, r) => {
                l.collect_subterms(out);
                r.collect_subterms(out);
            }
            Term::AEnc { key, body } | Term::SEnc { key, body } => {
                key.collect_subterms(out);
                body.collect_subterms(out);
            }
        }
    }

    /// Canonical byte encoding: injective, deterministic across runs and
    /// platforms. Used for state hashing and visited-set membership.
    ///
    /// Layout: a constructor tag (`Atom`=0x01, `Pair`=0x02, `AEnc`=0x03,
    /// `SEnc`=0x04) followed by the constructor's parts. An atom is its kind
    /// tag byte plus the UTF-8 label with a 4-byte big-endian length prefix;
    /// a compound term encodes each child with a 4-byte big-endian length
    /// prefix of the child's own encoding.
    pub fn canonical_encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode_into(&mut out);
        out
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        fn push_len_prefixed(out: &mut Vec<u8>, t: &Term) {
            let enc = t.canonical_encode();
            out.extend_from_slice(&(enc.len() as u32).to_be_bytes());
            out.extend_from_slice(&enc);
        }
        match self {
            Term::Atom(a) => {
                out.push(0x01);
                out.push(a.kind().tag());
                out.extend_from_slice(&(a.label().len() as u32).to_be_bytes());
                out.extend_from_slice(a.label().as_bytes());
            }
            Term::Pair(l, r) => {
                out.push(0x02);
                push_len_prefixed(out, l);
                push_len_prefixed(out, r);
            }
            Term::AEnc { key, body } => {
                out.push(0x03);
                push_len_prefixed(out, key);
                push_len_prefixed(out, body);
            }
            Term::SEnc { key, body } => {
                out.push(0x04);
                push_len_prefixed(out, key);
                push_len_prefixed(out, body);
            }
        }
    }

    /// Inverse of [`Term::canonical_encode`]. Rejects trailing bytes and
    /// re-validates the key-kind rules, so any decoded term could also have
    /// been built through the public constructors.
    pub fn canonical_decode(bytes: &[u8]) -> Result<Term, TermError> {
        let (term, consumed) = Term::decode_at(bytes, 0)?;
        if consumed != bytes.len() {
            return Err(TermError::TrailingBytes(bytes.len() - consumed));
        }
        Ok(term)
    }

    fn decode_at(bytes: &[u8], pos: usize) -> Result<(Term, usize), TermError> {
        fn read_u32(bytes: &[u8], pos: usize) -> Result<(u32, usize), TermError> {
            let end = pos
                .checked_add(4)
                .filter(|&e| e <= bytes.len())
                .ok_or(TermError::Truncated(pos))?;
            let mut buf = [0u8; 4];
            buf.copy_from_slice(&bytes[pos..end]);
            Ok((u32::from_be_bytes(buf), end))
        }
        fn read_child(bytes: &[u8], pos: usize) -> Result<(Term, usize), TermError> {
            let (len, pos) = read_u32(bytes, pos)?;
            let end = pos
                .checked_add(len as usize)
                .filter(|&e| e <= bytes.len())
                .ok_or(TermError::Truncated(pos))?;
            let (term, consumed) = Term::decode_at(&bytes[..end], pos)?;
            if consumed != end {
                return Err(TermError::TrailingBytes(end - consumed));
            }
            Ok((term, end))
        }

        let tag = *bytes.get(pos).ok_or(TermError::Truncated(pos))?;
        let pos = pos + 1;
        match tag {
            0x01 => {
                let kind_tag = *bytes.get(pos).ok_or(TermError::Truncated(pos))?;
                let kind =
                    AtomKind::from_tag(kind_tag).ok_or(TermError::BadKindTag(kind_tag, pos))?;
                let (len, pos) = read_u32(bytes, pos + 1)?;
                let end = pos
                    .checked_add(len as usize)
                    .filter(|&e| e <= bytes.len())
                    .ok_or(TermError::Truncated(pos))?;
                let label =
                    std::str::from_utf8(&bytes[pos..end]).map_err(|_| TermError::BadLabel)?;
                Ok((Term::atom(kind, label), end))
            }
            0x02 => {
                let (left, pos) = read_child(bytes, pos)?;
                let (right, pos) = read_child(bytes, pos)?;
                Ok((Term::pair(left, right), pos))
            }
            0x03 => {
                let (key, pos) = read_child(bytes, pos)?;
                let (body, pos) = read_child(bytes, pos)?;
                Ok((Term::aenc(key, body)?, pos))
            }
            0x04 => {
                let (key, pos) = read_child(bytes, pos)?;
                let (body, pos) = read_child(bytes, pos)?;
                Ok((Term::senc(key, body)?, pos))
            }
            other => Err(TermError::BadConstructorTag(other, pos - 1)),
        }
    }
}

impl fmt::Display for Term {
    /// Protocol-style rendering: concatenations as ` . `-separated fields,
    /// encryptions as `{body}_KEY` with underscores stripped from the key's
    /// display name (`{A . PW_A . N_A . …}_PCKS`, `{OTC}_NA`).
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn key_suffix(key: &Term) -> String {
            match key {
                Term::Atom(a) => a.display_name().replace('_', ""),
                other => format!("({other})"),
            }
        }
        match self {
            Term::Atom(a) => write!(f, "{a}"),
            Term::Pair(l, r) => {
                // Flatten the right spine; parenthesize a nested left pair so
                // the rendering stays unambiguous.
                match l.as_ref() {
                    Term::Pair(..) => write!(f, "({l}) . {r}"),
                    _ => write!(f, "{l} . {r}"),
                }
            }
            Term::AEnc { key, body } | Term::SEnc { key, body } => {
                write!(f, "{{{body}}}_{}", key_suffix(key))
            }
        }
    }
}

/// Builds an ownership-transfer request: the old owner's statement of who is
/// transferring to whom, sealed for the key server.
///
/// Returns `AEnc(pk_cks, id_a ∥ id_b ∥ n_b)`. Kind mismatches on any
/// argument are construction errors naming the offending argument.
pub fn make_otr(id_a: &Term, id_b: &Term, n_b: &Term, pk_cks: &Term) -> Result<Term, TermError> {
    fn expect(argument: &'static str, t: &Term, kind: AtomKind) -> Result<(), TermError> {
        if t.is_atom_of(kind) {
            Ok(())
        } else {
            Err(TermError::ArgumentKind {
                argument,
                expected: kind.name(),
                actual: t.to_string(),
            })
        }
    }
    expect("id_a", id_a, AtomKind::AgentName)?;
    expect("id_b", id_b, AtomKind::AgentName)?;
    expect("n_b", n_b, AtomKind::Nonce)?;
    if !pk_cks.is_atom_of(AtomKind::PublicKey) {
        return Err(TermError::AsymmetricKeyKind(pk_cks.to_string()));
    }
    Term::aenc(
        pk_cks.clone(),
        Term::cat(vec![id_a.clone(), id_b.clone(), n_b.clone()])?,
    )
}

/// What a pattern variable may bind: an atom of one fixed kind, or — for
/// `Any` — an arbitrary term. `Any` variables are deliberately opaque: the
/// intruder-message enumerator never invents fillers for them, it only
/// replays whole known terms (see the knowledge module).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    Kind(AtomKind),
    Any,
}

impl VarKind {
    fn admits(self, t: &Term) -> bool {
        match self {
            VarKind::Kind(k) => t.is_atom_of(k),
            VarKind::Any => true,
        }
    }
}

/// A term with holes: the receive side of a role step. Shapes mirror
/// [`Term`], with `Var` leaves allowed anywhere an atom could appear (and,
/// for `Any` variables, in whole-subterm positions such as an opaque
/// forwarded ciphertext).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Pattern {
    Atom(Atom),
    Var {
        name: String,
        kind: VarKind,
    },
    Pair(Arc<Pattern>, Arc<Pattern>),
    AEnc {
        key: Arc<Pattern>,
        body: Arc<Pattern>,
    },
    SEnc {
        key: Arc<Pattern>,
        body: Arc<Pattern>,
    },
}

impl Pattern {
    pub fn atom(kind: AtomKind, label: impl Into<String>) -> Pattern {
        Pattern::Atom(Atom::new(kind, label))
    }

    pub fn var(name: impl Into<String>, kind: VarKind) -> Pattern {
        Pattern::Var {
            name: name.into(),
            kind,
        }
    }

    pub fn pair(left: Pattern, right: Pattern) -> Pattern {
        Pattern::Pair(Arc::new(left), Arc::new(right))
    }

    /// Right-nested concatenation of patterns; mirrors [`Term::cat`].
    pub fn cat(parts: Vec<Pattern>) -> Result<Pattern, TermError> {
        let mut iter = parts.into_iter().rev();
        let last = iter.next().ok_or(TermError::EmptyConcat)?;
        Ok(iter.fold(last, |acc, p| Pattern::pair(p, acc)))
    }

    pub fn aenc(key: Pattern, body: Pattern) -> Pattern {
        Pattern::AEnc {
            key: Arc::new(key),
            body: Arc::new(body),
        }
    }

    pub fn senc(key: Pattern, body: Pattern) -> Pattern {
        Pattern::SEnc {
            key: Arc::new(key),
            body: Arc::new(body),
        }
    }

    /// A pattern with no holes that matches exactly `t`.
    pub fn from_term(t: &Term) -> Pattern {
        match t {
            Term::Atom(a) => Pattern::Atom(a.clone()),
            Term::Pair(l, r) => Pattern::pair(Pattern::from_term(l), Pattern::from_term(r)),
            Term::AEnc { key, body } => {
                Pattern::aenc(Pattern::from_term(key), Pattern::from_term(body))
            }
            Term::SEnc { key, body } => {
                Pattern::senc(Pattern::from_term(key), Pattern::from_term(body))
            }
        }
    }

    /// Variable names occurring in the pattern, with their kinds, in first-
    /// occurrence order. A name occurring twice keeps its first kind (the
    /// matcher checks both occurrences anyway).
    pub fn variables(&self) -> Vec<(String, VarKind)> {
        let mut out: Vec<(String, VarKind)> = Vec::new();
        self.collect_variables(&mut out);
        out
    }

    fn collect_variables(&self, out: &mut Vec<(String, VarKind)>) {
        match self {
            Pattern::Atom(_) => {}
            Pattern::Var { name, kind } => {
                if !out.iter().any(|(n, _)| n == name) {
                    out.push((name.clone(), *kind));
                }
            }
            Pattern::Pair(l, r) => {
                l.collect_variables(out);
                r.collect_variables(out);
            }
            Pattern::AEnc { key, body } | Pattern::SEnc { key, body } => {
                key.collect_variables(out);
                body.collect_variables(out);
            }
        }
    }

    /// Partial substitution: variables with a binding are replaced by the
    /// bound term, unbound variables stay variables. Turns a role's action
    /// template into the concrete pattern its current state expects —
    /// already-known fields become equality requirements, still-unknown
    /// fields remain holes.
    pub fn instantiate(&self, bindings: &Bindings) -> Pattern {
        match self {
            Pattern::Atom(_) => self.clone(),
            Pattern::Var { name, .. } => match bindings.get(name) {
                Some(t) => Pattern::from_term(t),
                None => self.clone(),
            },
            Pattern::Pair(l, r) => Pattern::pair(l.instantiate(bindings), r.instantiate(bindings)),
            Pattern::AEnc { key, body } => {
                Pattern::aenc(key.instantiate(bindings), body.instantiate(bindings))
            }
            Pattern::SEnc { key, body } => {
                Pattern::senc(key.instantiate(bindings), body.instantiate(bindings))
            }
        }
    }

    /// Substitutes bindings for variables. Fails if a variable is unbound or
    /// an encryption key position receives a term of the wrong kind.
    pub fn substitute(&self, bindings: &Bindings) -> Result<Term, TermError> {
        match self {
            Pattern::Atom(a) => Ok(Term::Atom(a.clone())),
            Pattern::Var { name, .. } => {
                bindings.get(name).cloned().ok_or(TermError::ArgumentKind {
                    argument: "variable",
                    expected: "bound name",
                    actual: name.clone(),
                })
            }
            Pattern::Pair(l, r) => Ok(Term::pair(l.substitute(bindings)?, r.substitute(bindings)?)),
            Pattern::AEnc { key, body } => {
                Term::aenc(key.substitute(bindings)?, body.substitute(bindings)?)
            }
            Pattern::SEnc { key, body } => {
                Term::senc(key.substitute(bindings)?, body.substitute(bindings)?)
            }
        }
    }
}

impl From<&Term> for Pattern {
    fn from(t: &Term) -> Pattern {
        Pattern::from_term(t)
    }
}

/// A map from variable names to the terms they matched.
///
/// Kind-restricted variables only ever hold atoms of their kind; `Any`
/// variables may hold arbitrary terms (an opaque ticket blob, a replayed
/// ciphertext).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings {
    map: BTreeMap<String, Term>,
}

impl Bindings {
    pub fn new() -> Bindings {
        Bindings::default()
    }

    pub fn get(&self, name: &str) -> Option<&Term> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    /// Inserts a binding that did not come from matching (initial role
    /// knowledge, a hand-over). Existing bindings are never overwritten: a
    /// second insert under the same name must agree with the first.
    pub fn insert(&mut self, name: impl Into<String>, value: Term) -> bool {
        match self.map.entry(name.into()) {
            btree_map::Entry::Vacant(e) => {
                e.insert(value);
                true
            }
            btree_map::Entry::Occupied(e) => *e.get() == value,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Term)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Matches `t` against `p`, extending `seed`.
///
/// On success the result binds every variable in `p`, agrees with `seed`,
/// and substituting it into `p` reproduces `t` exactly. A repeated variable
/// name is an equality constraint; a kind-restricted variable only matches
/// an atom of that kind. Failure is a value (`None`), not an error.
pub fn match_pattern(p: &Pattern, t: &Term, seed: &Bindings) -> Option<Bindings> {
    let mut bindings = seed.clone();
    if match_into(p, t, &mut bindings) {
        Some(bindings)
    } else {
        None
    }
}

fn match_into(p: &Pattern, t: &Term, bindings: &mut Bindings) -> bool {
    match (p, t) {
        (Pattern::Atom(pa), Term::Atom(ta)) => pa == ta,
        (Pattern::Var { name, kind }, _) => {
            if !kind.admits(t) {
                return false;
            }
            match bindings.get(name) {
                Some(bound) => bound == t,
                None => {
                    bindings.insert(name.clone(), t.clone());
                    true
                }
            }
        }
        (Pattern::Pair(pl, pr), Term::Pair(tl, tr)) => {
            match_into(pl, tl, bindings) && match_into(pr, tr, bindings)
        }
        (Pattern::AEnc { key: pk, body: pb }, Term::AEnc { key: tk, body: tb }) => {
            match_into(pk, tk, bindings) && match_into(pb, tb, bindings)
        }
        (Pattern::SEnc { key: pk, body: pb }, Term::SEnc { key: tk, body: tb }) => {
            match_into(pk, tk, bindings) && match_into(pb, tb, bindings)
        }
        _ => false,
    }
}
