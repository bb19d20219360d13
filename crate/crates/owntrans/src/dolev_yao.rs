//! The intruder's knowledge: what it has heard, what that lets it read, and
//! what it can therefore send.
//!
//! Knowledge is kept *analysis-closed*: every time a term is learned, all
//! possible decompositions (pair projection, decryption with known keys) are
//! applied to a fixpoint. Queries then only need *synthesis* — a structural
//! recursion checking whether a term can be composed from known parts. The
//! split keeps both operations terminating and cheap at this protocol's
//! message sizes.

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::term::{match_pattern, Atom, AtomKind, Bindings, Pattern, Term, VarKind};

/// The intruder's position at the start of a run: what it knows before any
/// message is sent, and whether it actively injects traffic or only listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntruderProfile {
    pub initial_knowledge: BTreeSet<Term>,
    /// `true`: synthesize and inject arbitrary derivable messages.
    /// `false`: passive wiretap — replay whole overheard terms only.
    pub active: bool,
}

impl IntruderProfile {
    /// The baseline attacker: knows every agent's name, the key server's
    /// public key, and one nonce of its own — never the server's private
    /// key, anyone's password, or an honest session nonce.
    pub fn base(
        agent_names: impl IntoIterator<Item = String>,
        own_nonce: Option<&str>,
    ) -> IntruderProfile {
        let mut initial_knowledge: BTreeSet<Term> = agent_names
            .into_iter()
            .map(|n| Term::atom(AtomKind::AgentName, n))
            .collect();
        initial_knowledge.insert(Term::atom(AtomKind::PublicKey, "CKS"));
        if let Some(n) = own_nonce {
            initial_knowledge.insert(Term::atom(AtomKind::Nonce, n));
        }
        IntruderProfile {
            initial_knowledge,
            active: true,
        }
    }
}

/// An analysis-closed set of terms the intruder knows, with a monotone
/// generation counter for cache invalidation by downstream consumers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeBase {
    facts: BTreeSet<Term>,
    generation: u64,
}

impl Default for KnowledgeBase {
    fn default() -> Self {
        KnowledgeBase::new()
    }
}

impl KnowledgeBase {
    pub fn new() -> KnowledgeBase {
        KnowledgeBase {
            facts: BTreeSet::new(),
            generation: 0,
        }
    }

    pub fn from_terms(terms: impl IntoIterator<Item = Term>) -> KnowledgeBase {
        let mut kb = KnowledgeBase::new();
        for t in terms {
            kb.learn_in_place(&t);
        }
        kb
    }

    /// Every known term, analysis-closed.
    pub fn facts(&self) -> &BTreeSet<Term> {
        &self.facts
    }

    /// Bumped every time learning added at least one new fact. Facts never
    /// shrink, so equal generations on the same lineage mean equal facts.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn contains(&self, t: &Term) -> bool {
        self.facts.contains(t)
    }

    /// Returns a new knowledge base extended with `t` and re-closed under
    /// analysis. `self` is unchanged.
    pub fn learn(&self, t: &Term) -> KnowledgeBase {
        let mut next = self.clone();
        next.learn_in_place(t);
        next
    }

    /// In-place variant of [`KnowledgeBase::learn`] for owners of a fresh
    /// copy (state successors clone the whole base anyway). Returns whether
    /// anything new was learned.
    pub fn learn_in_place(&mut self, t: &Term) -> bool {
        if !self.facts.insert(t.clone()) {
            return false;
        }
        self.generation += 1;
        let mut queue: VecDeque<Term> = VecDeque::new();
        queue.push_back(t.clone());
        while let Some(fact) = queue.pop_front() {
            let mut unlocked: Vec<Term> = Vec::new();
            match &fact {
                Term::Pair(l, r) => {
                    unlocked.push((**l).clone());
                    unlocked.push((**r).clone());
                }
                Term::SEnc { key, body } => {
                    if self.facts.contains(key) {
                        unlocked.push((**body).clone());
                    }
                }
                Term::AEnc { key, body } => {
                    if self.has_private_key_for(key) {
                        unlocked.push((**body).clone());
                    }
                }
                Term::Atom(a) => {
                    // A newly learned key may open ciphertexts heard earlier.
                    match a.kind() {
                        AtomKind::Nonce => {
                            for f in &self.facts {
                                if let Term::SEnc { key, body } = f {
                                    if key.as_ref() == &fact {
                                        unlocked.push((**body).clone());
                                    }
                                }
                            }
                        }
                        AtomKind::PrivateKey => {
                            for f in &self.facts {
                                if let Term::AEnc { key, body } = f {
                                    if matches!(key.as_atom(), Some(pk) if pk.kind() == AtomKind::PublicKey && pk.label() == a.label())
                                    {
                                        unlocked.push((**body).clone());
                                    }
                                }
                            }
                        }
                        _ => {}
                    }
                }
            }
            for u in unlocked {
                if self.facts.insert(u.clone()) {
                    queue.push_back(u);
                }
            }
        }
        true
    }

    fn has_private_key_for(&self, public_key: &Term) -> bool {
        match public_key.as_atom() {
            Some(pk) if pk.kind() == AtomKind::PublicKey => self
                .facts
                .contains(&Term::atom(AtomKind::PrivateKey, pk.label())),
            _ => false,
        }
    }

    /// Can the intruder produce `t`? True iff `t` is a known fact or can be
    /// composed from derivable parts (pairing, or encrypting a derivable
    /// body with a derivable key). Analysis already happened at learn time,
    /// so this is a plain structural recursion and always terminates.
    pub fn can_derive(&self, t: &Term) -> bool {
        let mut memo: HashMap<Term, bool> = HashMap::new();
        self.derive_memo(t, &mut memo)
    }

    fn derive_memo(&self, t: &Term, memo: &mut HashMap<Term, bool>) -> bool {
        if let Some(&known) = memo.get(t) {
            return known;
        }
        let result = self.facts.contains(t)
            || match t {
                Term::Atom(_) => false,
                Term::Pair(l, r) => self.derive_memo(l, memo) && self.derive_memo(r, memo),
                Term::AEnc { key, body } | Term::SEnc { key, body } => {
                    self.derive_memo(key, memo) && self.derive_memo(body, memo)
                }
            };
        memo.insert(t.clone(), result);
        result
    }

    /// Whole known terms that match `p` as-is: what a wiretapper can replay
    /// into a receive slot without understanding the contents. Includes
    /// forwarding ciphertexts whose interior the intruder cannot read.
    pub fn replayable_instances(&self, p: &Pattern) -> BTreeSet<Term> {
        self.facts
            .iter()
            .filter(|f| match_pattern(p, f, &Bindings::new()).is_some())
            .cloned()
            .collect()
    }

    /// Every message an active intruder can send that a receiver expecting
    /// `p` would accept: whole-term replays of known facts, plus — when all
    /// of `p`'s variables are kind-restricted — instantiations of those
    /// variables by atoms from `universe` whose resulting term is derivable.
    ///
    /// Variables of kind `Any` never get invented fillers: a pattern
    /// containing one is served by replay alone. This keeps the enumeration
    /// finite and typed while still covering ciphertext-forwarding attacks.
    pub fn synthesizable_instances(
        &self,
        p: &Pattern,
        universe: &BTreeSet<Atom>,
    ) -> BTreeSet<Term> {
        let mut out = self.replayable_instances(p);

        let vars = p.variables();
        if vars.iter().any(|(_, k)| matches!(k, VarKind::Any)) {
            return out;
        }

        // A filler atom can only survive the final derivability check if it
        // is derivable itself or occurs somewhere inside a known fact (a
        // replayed ciphertext can cover leaves the intruder cannot produce
        // alone). Anything else is pruned up front; the check at the leaf of
        // the enumeration still decides the survivors, so this is purely a
        // grid reduction.
        let mut seen_atoms: BTreeSet<Atom> = BTreeSet::new();
        for f in &self.facts {
            collect_atoms(f, &mut seen_atoms);
        }
        let mut memo: HashMap<Term, bool> = HashMap::new();

        // Enumerate assignments of each distinct variable to a same-kind
        // atom from the universe, depth-first over the variable list.
        let mut candidates: Vec<(&str, Vec<Term>)> = Vec::new();
        for (name, kind) in &vars {
            let VarKind::Kind(k) = kind else {
                unreachable!("any-kinds handled above")
            };
            let atoms: Vec<Term> = universe
                .iter()
                .filter(|a| a.kind() == *k)
                .filter(|a| {
                    seen_atoms.contains(a) || self.derive_memo(&Term::Atom((*a).clone()), &mut memo)
                })
                .map(|a| Term::Atom(a.clone()))
                .collect();
            if atoms.is_empty() {
                return out;
            }
            candidates.push((name.as_str(), atoms));
        }

        let mut assignment = Bindings::new();
        self.enumerate_assignments(p, &candidates, 0, &mut assignment, &mut memo, &mut out);
        out
    }

    fn enumerate_assignments(
        &self,
        p: &Pattern,
        candidates: &[(&str, Vec<Term>)],
        index: usize,
        assignment: &mut Bindings,
        memo: &mut HashMap<Term, bool>,
        out: &mut BTreeSet<Term>,
    ) {
        if index == candidates.len() {
            let t = p.substitute(assignment).expect("all variables assigned");
            if self.derive_memo(&t, memo) {
                out.insert(t);
            }
            return;
        }
        let (name, atoms) = &candidates[index];
        for atom in atoms {
            let mut next = assignment.clone();
            next.insert(name.to_string(), atom.clone());
            self.enumerate_assignments(p, candidates, index + 1, &mut next, memo, out);
        }
    }
}

/// Every atom occurring anywhere inside `t`, keys included.
fn collect_atoms(t: &Term, out: &mut BTreeSet<Atom>) {
    match t {
        Term::Atom(a) => {
            out.insert(a.clone());
        }
        Term::Pair(l, r) => {
            collect_atoms(l, out);
            collect_atoms(r, out);
        }
        Term::AEnc { key, body } | Term::SEnc { key, body } => {
            collect_atoms(key, out);
            collect_atoms(body, out);
        }
    }
}
