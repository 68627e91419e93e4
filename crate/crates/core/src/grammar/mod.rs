//! Context-free grammars over production-rule sequences.
//!
//! A [`Grammar`] is loaded from a small line-oriented BNF dialect:
//!
//! ```text
//! # comment
//! S -> S '+' T | T
//! T -> 'x' | '(' S ')'
//! ```
//!
//! Terminals are single-quoted (with `\\` and `\'` escapes), nonterminals are
//! bare identifiers, and the left-hand side of the first rule is the start
//! symbol. Rules keep the order in which they are written, alternatives
//! expanded left to right. A padding ("no-op") rule with an empty right-hand
//! side is always present as the last rule; a file may declare it explicitly
//! with an empty alternative (`Nothing ->`), otherwise one is appended under
//! the pseudo-nonterminal [`PADDING_NONTERMINAL`].

mod earley;
mod encoding;
mod loader;

pub use earley::{parse, parse_tokens, tokenize, ParseTree};
pub use encoding::{
    decode_onehot, encode_onehot, rules_to_string, tree_to_rules, OneHotMatrix, RuleSequence,
};

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

/// Name given to the padding pseudo-nonterminal when the grammar file does
/// not declare one.
pub const PADDING_NONTERMINAL: &str = "<pad>";

const EQUATION_GRAMMAR: &str = include_str!("../../grammars/equation.cfg");
const SMILES_GRAMMAR: &str = include_str!("../../grammars/smiles.cfg");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GrammarError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: undefined nonterminal `{name}`")]
    UndefinedNonterminal { line: usize, name: String },
    #[error("line {line}: duplicate padding rule")]
    DuplicatePadding { line: usize },
    #[error("line {line}: padding nonterminal `{name}` must have exactly one empty rule")]
    InvalidPadding { line: usize, name: String },
    #[error("grammar has no rules")]
    Empty,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("no terminal matches at byte offset {offset}")]
    Tokenize { offset: usize },
    #[error("string is not in the language (stuck after {consumed} of {total} tokens)")]
    NotInLanguage { consumed: usize, total: usize },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DerivationError {
    #[error("step {step}: rule {rule} has lhs `{found}` but `{expected}` is on top of the stack")]
    LhsMismatch {
        step: usize,
        rule: usize,
        expected: String,
        found: String,
    },
    #[error("rule index {rule} out of range at step {step}")]
    UnknownRule { step: usize, rule: usize },
    #[error("incomplete derivation: {pending} symbols left on the stack")]
    Incomplete { pending: usize },
    #[error("{surplus} surplus rules after the derivation completed")]
    Surplus { surplus: usize },
    #[error("sequence of length {len} exceeds t_max = {t_max}")]
    TooLong { len: usize, t_max: usize },
    #[error("row {row} is not one-hot")]
    NotOneHot { row: usize },
}

/// A grammar symbol, referring to the terminal or nonterminal table of its
/// [`Grammar`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symbol {
    Terminal(usize),
    Nonterminal(usize),
}

impl Symbol {
    pub fn is_terminal(self) -> bool {
        matches!(self, Symbol::Terminal(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Production {
    pub index: usize,
    /// Nonterminal id of the left-hand side.
    pub lhs: usize,
    pub rhs: Vec<Symbol>,
}

impl Production {
    /// Nonterminals of the right-hand side, left to right.
    pub fn rhs_nonterminals(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        self.rhs.iter().filter_map(|s| match *s {
            Symbol::Nonterminal(n) => Some(n),
            Symbol::Terminal(_) => None,
        })
    }
}

/// Per-nonterminal binary masks over the rule set.
///
/// `mask(a)[k]` is true iff rule `k` has `a` on its left-hand side. The
/// padding rule is only admitted by the padding pseudo-nonterminal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTable {
    masks: Vec<Vec<bool>>,
}

impl MaskTable {
    pub fn mask(&self, nonterminal: usize) -> &[bool] {
        &self.masks[nonterminal]
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn popcount(&self, nonterminal: usize) -> usize {
        self.masks[nonterminal].iter().filter(|&&m| m).count()
    }
}

/// Builds the mask table of `g` from scratch.
pub fn build_masks(g: &Grammar) -> MaskTable {
    let k = g.rules.len();
    let mut masks = vec![vec![false; k]; g.nonterminals.len()];
    for rule in &g.rules {
        masks[rule.lhs][rule.index] = true;
    }
    MaskTable { masks }
}

#[derive(Debug, Clone)]
pub struct Grammar {
    nonterminals: Vec<String>,
    terminals: Vec<String>,
    rules: Vec<Production>,
    start: usize,
    padding_rule: usize,
    rules_by_lhs: Vec<Vec<usize>>,
    masks: MaskTable,
    nonterminal_ids: HashMap<String, usize>,
}

impl Grammar {
    /// Loads a grammar from the text format described in the module docs.
    pub fn load(text: &str) -> Result<Grammar, GrammarError> {
        loader::load(text)
    }

    /// The arithmetic-expression grammar shipped with the crate.
    pub fn equations() -> Grammar {
        Self::load(EQUATION_GRAMMAR).expect("bundled equation grammar is valid")
    }

    /// The SMILES grammar shipped with the crate.
    pub fn smiles() -> Grammar {
        Self::load(SMILES_GRAMMAR).expect("bundled SMILES grammar is valid")
    }

    /// Source text of a bundled grammar by name (`equation` or `smiles`).
    pub fn bundled_source(name: &str) -> Option<&'static str> {
        match name {
            "equation" | "equations" => Some(EQUATION_GRAMMAR),
            "smiles" => Some(SMILES_GRAMMAR),
            _ => None,
        }
    }

    pub(crate) fn from_parts(
        nonterminals: Vec<String>,
        terminals: Vec<String>,
        rules: Vec<Production>,
        start: usize,
    ) -> Grammar {
        let padding_rule = rules.len() - 1;
        let mut rules_by_lhs = vec![Vec::new(); nonterminals.len()];
        for r in &rules {
            rules_by_lhs[r.lhs].push(r.index);
        }
        let nonterminal_ids = nonterminals
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        let mut g = Grammar {
            nonterminals,
            terminals,
            rules,
            start,
            padding_rule,
            rules_by_lhs,
            masks: MaskTable { masks: Vec::new() },
            nonterminal_ids,
        };
        g.masks = build_masks(&g);
        g
    }

    /// Number of rules, K, including the padding rule.
    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    pub fn rules(&self) -> &[Production] {
        &self.rules
    }

    pub fn rule(&self, index: usize) -> &Production {
        &self.rules[index]
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn padding_rule(&self) -> usize {
        self.padding_rule
    }

    /// Id of the padding pseudo-nonterminal.
    pub fn padding_nonterminal(&self) -> usize {
        self.rules[self.padding_rule].lhs
    }

    /// All nonterminal names, including the padding pseudo-nonterminal.
    pub fn nonterminals(&self) -> &[String] {
        &self.nonterminals
    }

    pub fn terminals(&self) -> &[String] {
        &self.terminals
    }

    pub fn nonterminal_id(&self, name: &str) -> Option<usize> {
        self.nonterminal_ids.get(name).copied()
    }

    pub fn terminal_id(&self, lexeme: &str) -> Option<usize> {
        self.terminals.iter().position(|t| t == lexeme)
    }

    pub fn rules_for(&self, nonterminal: usize) -> &[usize] {
        &self.rules_by_lhs[nonterminal]
    }

    pub fn masks(&self) -> &MaskTable {
        &self.masks
    }

    pub fn symbol_text(&self, s: Symbol) -> &str {
        match s {
            Symbol::Terminal(t) => &self.terminals[t],
            Symbol::Nonterminal(n) => &self.nonterminals[n],
        }
    }

    /// Finds the rule whose text form is `lhs -> rhs...`, e.g.
    /// `find_rule("T", &["'x'"])`.
    pub fn find_rule(&self, lhs: &str, rhs: &[&str]) -> Option<usize> {
        let lhs = self.nonterminal_id(lhs)?;
        self.rules_by_lhs[lhs].iter().copied().find(|&k| {
            let r = &self.rules[k];
            r.rhs.len() == rhs.len()
                && r.rhs.iter().zip(rhs).all(|(s, want)| match *s {
                    Symbol::Terminal(t) => {
                        want.len() >= 2
                            && want.starts_with('\'')
                            && want.ends_with('\'')
                            && self.terminals[t] == want[1..want.len() - 1]
                    }
                    Symbol::Nonterminal(n) => self.nonterminals[n] == *want,
                })
        })
    }

    pub fn display_rule(&self, index: usize) -> RuleDisplay<'_> {
        RuleDisplay { g: self, index }
    }
}

pub struct RuleDisplay<'a> {
    g: &'a Grammar,
    index: usize,
}

impl fmt::Display for RuleDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.g.rules[self.index];
        write!(f, "{} ->", self.g.nonterminals[r.lhs])?;
        for s in &r.rhs {
            match *s {
                Symbol::Terminal(t) => {
                    let escaped = self.g.terminals[t]
                        .replace('\\', "\\\\")
                        .replace('\'', "\\'");
                    write!(f, " '{escaped}'")?
                }
                Symbol::Nonterminal(n) => write!(f, " {}", self.g.nonterminals[n])?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equation_grammar_has_twelve_rules() {
        let g = Grammar::equations();
        assert_eq!(g.num_rules(), 12);
        assert_eq!(g.padding_rule(), 11);
        assert_eq!(g.nonterminals()[g.start()], "S");
        assert_eq!(g.find_rule("S", &["S", "'+'", "T"]), Some(0));
        assert_eq!(g.find_rule("S", &["T"]), Some(3));
        assert_eq!(g.find_rule("T", &["'x'"]), Some(7));
        assert_eq!(g.find_rule("T", &["'3'"]), Some(10));
    }

    #[test]
    fn minimal_grammar() {
        let g = Grammar::load("S -> 'a'").unwrap();
        assert_eq!(g.terminals().len(), 1);
        // S plus the padding pseudo-nonterminal
        assert_eq!(g.nonterminals().len(), 2);
        assert_eq!(g.num_rules(), 2);
    }

    #[test]
    fn smiles_grammar_starts_with_smiles_chain() {
        let g = Grammar::smiles();
        assert_eq!(g.nonterminals()[g.start()], "smiles");
        assert_eq!(g.find_rule("smiles", &["chain"]), Some(0));
        assert_eq!(g.num_rules(), 77);
        assert!(g.terminal_id("\\").is_some());
    }

    #[test]
    fn equation_masks() {
        let g = Grammar::equations();
        let m = build_masks(&g);
        let s = g.nonterminal_id("S").unwrap();
        let t = g.nonterminal_id("T").unwrap();
        let ones =
            |a: usize| -> Vec<usize> { (0..g.num_rules()).filter(|&k| m.mask(a)[k]).collect() };
        assert_eq!(ones(s), vec![0, 1, 2, 3]);
        assert_eq!(ones(t), vec![4, 5, 6, 7, 8, 9, 10]);
        assert_eq!(ones(g.padding_nonterminal()), vec![11]);
    }

    #[test]
    fn smiles_start_mask_has_single_rule() {
        let g = Grammar::smiles();
        assert_eq!(g.masks().popcount(g.start()), 1);
        assert!(g.masks().mask(g.start())[0]);
    }

    #[test]
    fn masks_partition_rules() {
        for g in [Grammar::equations(), Grammar::smiles()] {
            let m = build_masks(&g);
            for k in 0..g.num_rules() {
                let owners = (0..m.len()).filter(|&a| m.mask(a)[k]).count();
                assert_eq!(owners, 1, "rule {k}");
            }
            for a in 0..m.len() {
                assert!(m.popcount(a) >= 1);
            }
        }
    }

    #[test]
    fn display_round_trips_escapes() {
        let g = Grammar::smiles();
        let k = g.find_rule("bond", &["'\\'"]).unwrap();
        assert_eq!(g.display_rule(k).to_string(), "bond -> '\\\\'");
    }
}
