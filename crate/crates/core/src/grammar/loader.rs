use std::collections::HashMap;

use super::{Grammar, GrammarError, Production, Symbol, PADDING_NONTERMINAL};

#[derive(Debug, Clone, PartialEq)]
enum Item {
    Terminal(String),
    Ident(String),
    Bar,
}

struct RawRule {
    line: usize,
    lhs: String,
    rhs: Vec<Item>,
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

/// Splits one rule line into items. Comments start at `#` outside quotes.
fn lex_line(line_no: usize, text: &str) -> Result<Vec<Item>, GrammarError> {
    let syntax = |message: String| GrammarError::Syntax {
        line: line_no,
        message,
    };
    let mut items = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(_, c)) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '#' {
            break;
        } else if c == '|' {
            chars.next();
            items.push(Item::Bar);
        } else if c == '\'' {
            chars.next();
            let mut lexeme = String::new();
            let mut closed = false;
            while let Some((_, c)) = chars.next() {
                match c {
                    '\\' => match chars.next() {
                        Some((_, e @ ('\\' | '\''))) => lexeme.push(e),
                        Some((_, e)) => return Err(syntax(format!("unknown escape `\\{e}`"))),
                        None => return Err(syntax("dangling escape".into())),
                    },
                    '\'' => {
                        closed = true;
                        break;
                    }
                    c => lexeme.push(c),
                }
            }
            if !closed {
                return Err(syntax("unterminated terminal".into()));
            }
            if lexeme.is_empty() {
                return Err(syntax("empty terminal".into()));
            }
            items.push(Item::Terminal(lexeme));
        } else if is_ident_start(c) {
            let mut name = String::new();
            while let Some(&(_, c)) = chars.peek() {
                if !is_ident_char(c) {
                    break;
                }
                name.push(c);
                chars.next();
            }
            items.push(Item::Ident(name));
        } else if c == '-' {
            chars.next();
            match chars.next() {
                Some((_, '>')) => items.push(Item::Ident("->".into())),
                _ => return Err(syntax("expected `->`".into())),
            }
        } else {
            return Err(syntax(format!("unexpected character `{c}`")));
        }
    }
    Ok(items)
}

fn raw_rules(text: &str) -> Result<Vec<RawRule>, GrammarError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let items = lex_line(line_no, line)?;
        if items.is_empty() {
            continue;
        }
        let syntax = |message: &str| GrammarError::Syntax {
            line: line_no,
            message: message.to_string(),
        };
        let lhs = match &items[0] {
            Item::Ident(n) if n != "->" => n.clone(),
            _ => return Err(syntax("expected a nonterminal on the left-hand side")),
        };
        if items.get(1) != Some(&Item::Ident("->".into())) {
            return Err(syntax("expected `->` after the left-hand side"));
        }
        let mut alt = Vec::new();
        let mut push_alt = |alt: &mut Vec<Item>| {
            out.push(RawRule {
                line: line_no,
                lhs: lhs.clone(),
                rhs: std::mem::take(alt),
            })
        };
        for item in &items[2..] {
            match item {
                Item::Bar => push_alt(&mut alt),
                Item::Ident(n) if n == "->" => return Err(syntax("unexpected `->`")),
                other => alt.push(other.clone()),
            }
        }
        push_alt(&mut alt);
    }
    Ok(out)
}

pub(super) fn load(text: &str) -> Result<Grammar, GrammarError> {
    let raw = raw_rules(text)?;
    if raw.is_empty() {
        return Err(GrammarError::Empty);
    }

    // Padding declaration: a single empty alternative.
    let mut padding: Option<(usize, String)> = None;
    for r in &raw {
        if r.rhs.is_empty() {
            if padding.is_some() {
                return Err(GrammarError::DuplicatePadding { line: r.line });
            }
            padding = Some((r.line, r.lhs.clone()));
        }
    }
    if let Some((line, name)) = &padding {
        let owned = raw.iter().filter(|r| &r.lhs == name).count();
        if owned != 1 || raw[0].lhs == *name {
            return Err(GrammarError::InvalidPadding {
                line: *line,
                name: name.clone(),
            });
        }
    }
    let padding_name = padding
        .as_ref()
        .map(|(_, n)| n.clone())
        .unwrap_or_else(|| PADDING_NONTERMINAL.to_string());

    let mut nonterminals: Vec<String> = Vec::new();
    let mut nt_ids: HashMap<String, usize> = HashMap::new();
    for r in raw.iter().filter(|r| r.lhs != padding_name) {
        if !nt_ids.contains_key(&r.lhs) {
            nt_ids.insert(r.lhs.clone(), nonterminals.len());
            nonterminals.push(r.lhs.clone());
        }
    }
    let padding_nt = nonterminals.len();
    nt_ids.insert(padding_name.clone(), padding_nt);
    nonterminals.push(padding_name.clone());

    let mut terminals: Vec<String> = Vec::new();
    let mut t_ids: HashMap<String, usize> = HashMap::new();
    let mut rules = Vec::new();
    for r in raw.iter().filter(|r| r.lhs != padding_name) {
        let mut rhs = Vec::with_capacity(r.rhs.len());
        for item in &r.rhs {
            match item {
                Item::Terminal(t) => {
                    let id = *t_ids.entry(t.clone()).or_insert_with(|| {
                        terminals.push(t.clone());
                        terminals.len() - 1
                    });
                    rhs.push(Symbol::Terminal(id));
                }
                Item::Ident(n) => match nt_ids.get(n) {
                    Some(&id) if id != padding_nt => rhs.push(Symbol::Nonterminal(id)),
                    _ => {
                        return Err(GrammarError::UndefinedNonterminal {
                            line: r.line,
                            name: n.clone(),
                        })
                    }
                },
                Item::Bar => unreachable!(),
            }
        }
        rules.push(Production {
            index: rules.len(),
            lhs: nt_ids[&r.lhs],
            rhs,
        });
    }
    rules.push(Production {
        index: rules.len(),
        lhs: padding_nt,
        rhs: Vec::new(),
    });

    Ok(Grammar::from_parts(nonterminals, terminals, rules, 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternatives_keep_written_order() {
        let g = load("A -> 'x' | B 'y'\nB -> 'z'\nA -> 'w'").unwrap();
        let shown: Vec<String> = (0..g.num_rules())
            .map(|k| g.display_rule(k).to_string())
            .collect();
        assert_eq!(
            shown,
            vec!["A -> 'x'", "A -> B 'y'", "B -> 'z'", "A -> 'w'", "<pad> ->"]
        );
    }

    #[test]
    fn explicit_padding_is_moved_last() {
        let g = load("S -> 'a' S | 'a'\nNothing ->\n").unwrap();
        assert_eq!(g.num_rules(), 3);
        assert_eq!(g.padding_rule(), 2);
        assert_eq!(g.nonterminals()[g.padding_nonterminal()], "Nothing");
    }

    #[test]
    fn duplicate_padding_rejected() {
        let err = load("S -> 'a'\nN ->\nM ->").unwrap_err();
        assert_eq!(err, GrammarError::DuplicatePadding { line: 3 });
    }

    #[test]
    fn undefined_nonterminal_reports_line() {
        let err = load("S -> T\n\nT -> U 'a'").unwrap_err();
        assert_eq!(
            err,
            GrammarError::UndefinedNonterminal {
                line: 3,
                name: "U".into()
            }
        );
    }

    #[test]
    fn syntax_errors_report_line() {
        assert!(matches!(
            load("# c\nS 'a'"),
            Err(GrammarError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            load("S -> 'a"),
            Err(GrammarError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            load("S -> ''"),
            Err(GrammarError::Syntax { line: 1, .. })
        ));
        assert!(matches!(load("# nothing\n"), Err(GrammarError::Empty)));
    }

    #[test]
    fn comments_and_escapes() {
        let g = load("S -> '#' | '\\'' | '\\\\' # trailing").unwrap();
        assert_eq!(g.terminals(), &["#", "'", "\\"]);
    }
}
