//! An independent derivability oracle shared by the cross-check and
//! acceptance suites. It deliberately shares no code with the production
//! knowledge base: it interleaves *all* analysis and synthesis rules
//! breadth-first over the subterm universe until fixpoint.

use std::collections::BTreeSet;

use owntrans::{AtomKind, KnowledgeBase, Term};
use rand::rngs::StdRng;
use rand::Rng;

/// All subterms of the given terms — the candidate space for intermediate
/// derivation steps. Composition never needs to leave it: every part of a
/// composed query is a subterm of the query, and every analysis product is a
/// subterm of some fact.
pub fn subterm_universe(terms: &[Term]) -> BTreeSet<Term> {
    let mut out = BTreeSet::new();
    for t in terms {
        out.extend(t.subterms());
    }
    out
}

/// Brute-force derivability: starting from `facts`, applies every analysis
/// rule (pair projection, decryption with a derivable key) and every
/// one-step composition inside the subterm universe of `facts ∪ {query}`,
/// breadth-first, until nothing new appears. Terminates because everything
/// reachable lives in the finite subterm universe (analysis products are
/// subterms of facts, compositions are drawn from the universe), so each
/// productive round shrinks the remaining space; the round cap is just a
/// backstop. Returns whether `query` was reached.
pub fn oracle_derivable(facts: &[Term], query: &Term) -> bool {
    let mut universe_seed: Vec<Term> = facts.to_vec();
    universe_seed.push(query.clone());
    let universe = subterm_universe(&universe_seed);

    let mut known: BTreeSet<Term> = facts.iter().cloned().collect();
    for _ in 0..=universe.len() + facts.len() {
        let mut new: Vec<Term> = Vec::new();

        // Analysis: decompose everything currently known.
        for f in &known {
            match f {
                Term::Pair(l, r) => {
                    new.push((**l).clone());
                    new.push((**r).clone());
                }
                Term::SEnc { key, body } => {
                    if known.contains(key.as_ref()) {
                        new.push((**body).clone());
                    }
                }
                Term::AEnc { key, body } => {
                    if let Some(pk) = key.as_atom() {
                        if known.contains(&Term::atom(AtomKind::PrivateKey, pk.label())) {
                            new.push((**body).clone());
                        }
                    }
                }
                Term::Atom(_) => {}
            }
        }

        // Synthesis: every universe term composable in one step from knowns.
        for u in &universe {
            if known.contains(u) {
                continue;
            }
            let composable = match u {
                Term::Atom(_) => false,
                Term::Pair(l, r) => known.contains(l.as_ref()) && known.contains(r.as_ref()),
                Term::AEnc { key, body } | Term::SEnc { key, body } => {
                    known.contains(key.as_ref()) && known.contains(body.as_ref())
                }
            };
            if composable {
                new.push(u.clone());
            }
        }

        let before = known.len();
        known.extend(new);
        if known.len() == before {
            break;
        }
    }
    known.contains(query)
}

/// Panics if the production knowledge base and the oracle disagree on one
/// derivability question.
pub fn assert_agreement(facts: &[Term], query: &Term, context: &str) {
    let kb = KnowledgeBase::from_terms(facts.iter().cloned());
    let implementation = kb.can_derive(query);
    let oracle = oracle_derivable(facts, query);
    assert_eq!(
        implementation, oracle,
        "derivability disagreement ({context}): facts={facts:?}, query={query}, implementation says {implementation}, oracle says {oracle}"
    );
}

/// The six-atom vocabulary every random case draws from. Includes both
/// halves of the asymmetric pair so decryption chains are reachable.
pub fn vocabulary() -> Vec<Term> {
    vec![
        Term::atom(AtomKind::AgentName, "A"),
        Term::atom(AtomKind::Password, "PW_A"),
        Term::atom(AtomKind::Nonce, "N_A"),
        Term::atom(AtomKind::Nonce, "N_B"),
        Term::atom(AtomKind::PublicKey, "CKS"),
        Term::atom(AtomKind::PrivateKey, "CKS"),
    ]
}

pub fn random_term(rng: &mut StdRng, depth: usize) -> Term {
    let vocab = vocabulary();
    if depth == 0 {
        return vocab[rng.gen_range(0..vocab.len())].clone();
    }
    match rng.gen_range(0..4u8) {
        0 => vocab[rng.gen_range(0..vocab.len())].clone(),
        1 => Term::pair(random_term(rng, depth - 1), random_term(rng, depth - 1)),
        2 => Term::aenc(
            Term::atom(AtomKind::PublicKey, "CKS"),
            random_term(rng, depth - 1),
        )
        .expect("public-key atom is a valid asymmetric key"),
        _ => {
            let key = if rng.gen_bool(0.5) { "N_A" } else { "N_B" };
            Term::senc(
                Term::atom(AtomKind::Nonce, key),
                random_term(rng, depth - 1),
            )
            .expect("nonce atom is a valid symmetric key")
        }
    }
}
