//! Tokenization and Earley parsing with a deterministic canonical parse.

use std::collections::HashSet;

use super::{Grammar, ParseError, Symbol};

/// A parse tree. Leaves carry a terminal symbol and no rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    pub symbol: Symbol,
    pub rule: Option<usize>,
    pub children: Vec<ParseTree>,
}

impl ParseTree {
    /// Concatenation of the leaf lexemes, left to right.
    pub fn yield_string(&self, g: &Grammar) -> String {
        let mut out = String::new();
        self.push_leaves(g, &mut out);
        out
    }

    fn push_leaves(&self, g: &Grammar, out: &mut String) {
        match self.symbol {
            Symbol::Terminal(t) => out.push_str(&g.terminals()[t]),
            Symbol::Nonterminal(_) => {
                for c in &self.children {
                    c.push_leaves(g, out);
                }
            }
        }
    }

    /// Number of internal (rule-carrying) nodes.
    pub fn internal_nodes(&self) -> usize {
        match self.rule {
            None => 0,
            Some(_) => {
                1 + self
                    .children
                    .iter()
                    .map(|c| c.internal_nodes())
                    .sum::<usize>()
            }
        }
    }
}

/// Greedy longest-match tokenization against the grammar's terminal lexemes.
pub fn tokenize(s: &str, g: &Grammar) -> Result<Vec<usize>, ParseError> {
    let mut by_len: Vec<(usize, &str)> = g
        .terminals()
        .iter()
        .enumerate()
        .map(|(i, t)| (i, t.as_str()))
        .collect();
    by_len.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));

    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < s.len() {
        let rest = &s[pos..];
        match by_len.iter().find(|(_, lex)| rest.starts_with(lex)) {
            Some(&(id, lex)) => {
                tokens.push(id);
                pos += lex.len();
            }
            None => return Err(ParseError::Tokenize { offset: pos }),
        }
    }
    Ok(tokens)
}

/// Parses `s` into a parse tree rooted at the start symbol.
pub fn parse(s: &str, g: &Grammar) -> Result<ParseTree, ParseError> {
    let tokens = tokenize(s, g)?;
    parse_tokens(&tokens, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Item {
    rule: u32,
    dot: u32,
    origin: u32,
}

struct Chart<'g> {
    g: &'g Grammar,
    tokens: &'g [usize],
    /// Items in insertion order per position.
    sets: Vec<Vec<Item>>,
    seen: Vec<HashSet<Item>>,
    /// Completed (rule, origin) pairs per end position.
    done: Vec<HashSet<(u32, u32)>>,
}

impl<'g> Chart<'g> {
    fn add(&mut self, at: usize, item: Item) {
        if self.seen[at].insert(item) {
            self.sets[at].push(item);
        }
    }

    fn fill(&mut self) {
        let n = self.tokens.len();
        for &r in self.g.rules_for(self.g.start()) {
            self.add(
                0,
                Item {
                    rule: r as u32,
                    dot: 0,
                    origin: 0,
                },
            );
        }
        for i in 0..=n {
            let mut idx = 0;
            while idx < self.sets[i].len() {
                let item = self.sets[i][idx];
                idx += 1;
                let rule = self.g.rule(item.rule as usize);
                match rule.rhs.get(item.dot as usize) {
                    None => {
                        // complete
                        self.done[i].insert((item.rule, item.origin));
                        let lhs = rule.lhs;
                        let origin = item.origin as usize;
                        let mut j = 0;
                        while j < self.sets[origin].len() {
                            let waiting = self.sets[origin][j];
                            j += 1;
                            let wr = self.g.rule(waiting.rule as usize);
                            if wr.rhs.get(waiting.dot as usize) == Some(&Symbol::Nonterminal(lhs)) {
                                self.add(
                                    i,
                                    Item {
                                        dot: waiting.dot + 1,
                                        ..waiting
                                    },
                                );
                            }
                        }
                    }
                    Some(&Symbol::Nonterminal(b)) => {
                        for &r in self.g.rules_for(b) {
                            self.add(
                                i,
                                Item {
                                    rule: r as u32,
                                    dot: 0,
                                    origin: i as u32,
                                },
                            );
                        }
                        // No nullable rules exist (padding is never predicted),
                        // so completions of `b` at `i` cannot already exist.
                    }
                    Some(&Symbol::Terminal(t)) => {
                        if i < n && self.tokens[i] == t {
                            self.add(
                                i + 1,
                                Item {
                                    dot: item.dot + 1,
                                    ..item
                                },
                            );
                        }
                    }
                }
            }
        }
    }

    /// Whether `rhs[..dot]` of `rule` derives `tokens[origin..at]`.
    fn prefix_ok(&self, rule: usize, dot: usize, origin: usize, at: usize) -> bool {
        if dot == 0 {
            return at == origin;
        }
        self.seen[at].contains(&Item {
            rule: rule as u32,
            dot: dot as u32,
            origin: origin as u32,
        })
    }

    fn completes(&self, nt: usize, from: usize, to: usize) -> bool {
        self.g
            .rules_for(nt)
            .iter()
            .any(|&r| self.done[to].contains(&(r as u32, from as u32)))
    }

    /// Builds the canonical tree for `nt` spanning `from..to`: lowest rule
    /// index first, and for each rhs symbol (scanned right to left) the
    /// earliest feasible split point.
    fn build(
        &self,
        nt: usize,
        from: usize,
        to: usize,
        active: &mut HashSet<(usize, usize, usize)>,
    ) -> Option<ParseTree> {
        for &r in self.g.rules_for(nt) {
            if !self.done[to].contains(&(r as u32, from as u32)) {
                continue;
            }
            if !active.insert((r, from, to)) {
                continue;
            }
            let len = self.g.rule(r).rhs.len();
            let mut children = Vec::with_capacity(len);
            let found = self.match_rhs(r, len, from, to, active, &mut children);
            active.remove(&(r, from, to));
            if found {
                children.reverse();
                return Some(ParseTree {
                    symbol: Symbol::Nonterminal(nt),
                    rule: Some(r),
                    children,
                });
            }
        }
        None
    }

    fn match_rhs(
        &self,
        rule: usize,
        pos: usize,
        origin: usize,
        end: usize,
        active: &mut HashSet<(usize, usize, usize)>,
        out: &mut Vec<ParseTree>,
    ) -> bool {
        if pos == 0 {
            return end == origin;
        }
        match self.g.rule(rule).rhs[pos - 1] {
            Symbol::Terminal(t) => {
                if end == origin || self.tokens[end - 1] != t {
                    return false;
                }
                if !self.prefix_ok(rule, pos - 1, origin, end - 1) {
                    return false;
                }
                out.push(ParseTree {
                    symbol: Symbol::Terminal(t),
                    rule: None,
                    children: Vec::new(),
                });
                if self.match_rhs(rule, pos - 1, origin, end - 1, active, out) {
                    return true;
                }
                out.pop();
                false
            }
            Symbol::Nonterminal(b) => {
                for k in origin..end {
                    if !self.completes(b, k, end) || !self.prefix_ok(rule, pos - 1, origin, k) {
                        continue;
                    }
                    let Some(child) = self.build(b, k, end, active) else {
                        continue;
                    };
                    let mark = out.len();
                    out.push(child);
                    if self.match_rhs(rule, pos - 1, origin, k, active, out) {
                        return true;
                    }
                    out.truncate(mark);
                }
                false
            }
        }
    }
}

/// Parses an already tokenized input.
pub fn parse_tokens(tokens: &[usize], g: &Grammar) -> Result<ParseTree, ParseError> {
    let n = tokens.len();
    let mut chart = Chart {
        g,
        tokens,
        sets: vec![Vec::new(); n + 1],
        seen: vec![HashSet::new(); n + 1],
        done: vec![HashSet::new(); n + 1],
    };
    chart.fill();
    let not_in_language = || {
        let consumed = (0..=n)
            .rev()
            .find(|&i| !chart.sets[i].is_empty())
            .unwrap_or(0);
        ParseError::NotInLanguage { consumed, total: n }
    };
    if !chart.completes(g.start(), 0, n) {
        return Err(not_in_language());
    }
    chart
        .build(g.start(), 0, n, &mut HashSet::new())
        .ok_or_else(not_in_language)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::{tree_to_rules, Grammar};

    fn lexemes(s: &str, g: &Grammar) -> Vec<String> {
        tokenize(s, g)
            .unwrap()
            .into_iter()
            .map(|t| g.terminals()[t].clone())
            .collect()
    }

    #[test]
    fn tokenize_multichar_terminals() {
        let eq = Grammar::equations();
        assert_eq!(lexemes("sin(x)", &eq), vec!["sin(", "x", ")"]);
        assert_eq!(lexemes("", &eq), Vec::<String>::new());
        let sm = Grammar::smiles();
        assert_eq!(lexemes("Cl", &sm), vec!["Cl"]);
        assert_eq!(lexemes("[C@@H]", &sm), vec!["[", "C", "@@", "H", "]"]);
    }

    #[test]
    fn tokenize_error_offset() {
        let eq = Grammar::equations();
        assert_eq!(
            tokenize("x+y", &eq),
            Err(ParseError::Tokenize { offset: 2 })
        );
    }

    #[test]
    fn parse_yields_input() {
        let eq = Grammar::equations();
        for s in ["x", "2+x", "3*x+exp(3)+exp(1)", "sin((x))/3"] {
            let t = parse(s, &eq).unwrap();
            assert_eq!(t.yield_string(&eq), s);
            assert_eq!(t.symbol, Symbol::Nonterminal(eq.start()));
        }
    }

    #[test]
    fn rejects_malformed() {
        let eq = Grammar::equations();
        assert!(matches!(
            parse("2*1+exp3)+exp(2)", &eq),
            Err(ParseError::Tokenize { .. })
        ));
        assert!(matches!(
            parse("x+", &eq),
            Err(ParseError::NotInLanguage { .. })
        ));
        assert!(parse("", &eq).is_err());
    }

    #[test]
    fn smiles_examples() {
        let sm = Grammar::smiles();
        let t = parse("c1ccccc1", &sm).unwrap();
        assert_eq!(t.rule, Some(0));
        assert!(parse("C12(CCCCC1)CCCCC2", &sm).is_ok());
        assert!(parse("C(", &sm).is_err());
        assert!(parse("[NH3+]CC(=O)[O-]", &sm).is_ok());
    }

    #[test]
    fn ambiguous_grammar_prefers_lowest_rule() {
        // "aa" parses as S -> S S or S -> 'a' 'a'; rule 0 wins.
        let g = Grammar::load("S -> S S | 'a' 'a' | 'a'").unwrap();
        let t = parse("aa", &g).unwrap();
        assert_eq!(tree_to_rules(&t).0, vec![0, 2, 2]);
        let g = Grammar::load("S -> 'a' 'a' | S S | 'a'").unwrap();
        let t = parse("aa", &g).unwrap();
        assert_eq!(tree_to_rules(&t).0, vec![0]);
    }

    #[test]
    fn unit_cycles_terminate() {
        let g = Grammar::load("S -> A | 'b'\nA -> S | 'a'").unwrap();
        let t = parse("a", &g).unwrap();
        assert_eq!(tree_to_rules(&t).0, vec![0, 3]);
    }
}
