//! Parse trees to rule sequences, rule sequences to strings, and the
//! padded one-hot matrix form consumed by the encoder.

use serde::{Deserialize, Serialize};

use super::{DerivationError, Grammar, ParseTree, Symbol};

/// Production indices of a leftmost derivation, in application order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct RuleSequence(pub Vec<usize>);

impl RuleSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl From<Vec<usize>> for RuleSequence {
    fn from(v: Vec<usize>) -> Self {
        RuleSequence(v)
    }
}

/// Pre-order, left-to-right linearization of a parse tree.
pub fn tree_to_rules(t: &ParseTree) -> RuleSequence {
    fn walk(t: &ParseTree, out: &mut Vec<usize>) {
        if let Some(r) = t.rule {
            out.push(r);
            for c in &t.children {
                walk(c, out);
            }
        }
    }
    let mut out = Vec::new();
    walk(t, &mut out);
    RuleSequence(out)
}

/// Replays a derivation with a stack and returns the derived string.
pub fn rules_to_string(r: &RuleSequence, g: &Grammar) -> Result<String, DerivationError> {
    let mut stack = vec![Symbol::Nonterminal(g.start())];
    let mut out = String::new();
    let mut rules = r.0.iter().copied().enumerate();
    while let Some(sym) = stack.pop() {
        match sym {
            Symbol::Terminal(t) => out.push_str(&g.terminals()[t]),
            Symbol::Nonterminal(expected) => {
                let Some((step, k)) = rules.next() else {
                    let pending = 1 + stack.iter().filter(|s| !s.is_terminal()).count();
                    return Err(DerivationError::Incomplete { pending });
                };
                if k >= g.num_rules() {
                    return Err(DerivationError::UnknownRule { step, rule: k });
                }
                let rule = g.rule(k);
                if rule.lhs != expected {
                    return Err(DerivationError::LhsMismatch {
                        step,
                        rule: k,
                        expected: g.nonterminals()[expected].clone(),
                        found: g.nonterminals()[rule.lhs].clone(),
                    });
                }
                stack.extend(rule.rhs.iter().rev());
            }
        }
    }
    let surplus = rules.count();
    if surplus > 0 {
        return Err(DerivationError::Surplus { surplus });
    }
    Ok(out)
}

/// Binary `rows x cols` matrix with (normally) exactly one 1 per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
    true_length: usize,
}

impl OneHotMatrix {
    /// Wraps raw 0/1 data without validation; [`decode_onehot`] checks it.
    /// The true length is the row count before trailing padding rows, the
    /// padding rule being the last column.
    pub fn from_raw(rows: usize, cols: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows * cols");
        let is_pad = |t: usize| {
            let row = &data[t * cols..(t + 1) * cols];
            cols > 0 && row[cols - 1] == 1 && row[..cols - 1].iter().all(|&v| v == 0)
        };
        let mut true_length = rows;
        while true_length > 0 && is_pad(true_length - 1) {
            true_length -= 1;
        }
        OneHotMatrix {
            rows,
            cols,
            data,
            true_length,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    pub fn row(&self, t: usize) -> &[u8] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    /// Column holding the 1 in each row; valid only for well-formed matrices.
    pub fn hot_indices(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|t| self.row(t).iter().position(|&v| v == 1).unwrap_or(0))
            .collect()
    }

    /// Row-major values as floats.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn encode_onehot(
    r: &RuleSequence,
    g: &Grammar,
    t_max: usize,
) -> Result<OneHotMatrix, DerivationError> {
    if r.len() > t_max {
        return Err(DerivationError::TooLong {
            len: r.len(),
            t_max,
        });
    }
    let k = g.num_rules();
    let mut data = vec![0u8; t_max * k];
    for t in 0..t_max {
        let idx = r.0.get(t).copied().unwrap_or(g.padding_rule());
        if idx >= k {
            return Err(DerivationError::UnknownRule { step: t, rule: idx });
        }
        data[t * k + idx] = 1;
    }
    Ok(OneHotMatrix {
        rows: t_max,
        cols: k,
        data,
        true_length: r.len(),
    })
}

pub fn decode_onehot(m: &OneHotMatrix) -> Result<RuleSequence, DerivationError> {
    let mut out = Vec::with_capacity(m.rows);
    for t in 0..m.rows {
        let row = m.row(t);
        let ones = row.iter().filter(|&&v| v == 1).count();
        let others = row.iter().filter(|&&v| v != 0 && v != 1).count();
        if ones != 1 || others != 0 {
            return Err(DerivationError::NotOneHot { row: t });
        }
        out.push(row.iter().position(|&v| v == 1).unwrap());
    }
    let pad = m.cols - 1;
    while out.last() == Some(&pad) {
        out.pop();
    }
    Ok(RuleSequence(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse;
    use proptest::prelude::*;

    #[test]
    fn preorder_examples() {
        let g = Grammar::equations();
        assert_eq!(tree_to_rules(&parse("x", &g).unwrap()).0, vec![3, 7]);
        assert_eq!(
            tree_to_rules(&parse("2+x", &g).unwrap()).0,
            vec![0, 3, 9, 7]
        );
        let single = Grammar::load("S -> 'a'").unwrap();
        assert_eq!(tree_to_rules(&parse("a", &single).unwrap()).0, vec![0]);
    }

    #[test]
    fn length_equals_internal_nodes() {
        let g = Grammar::smiles();
        let t = parse("CC(=O)Oc1ccccc1C(=O)O", &g).unwrap();
        assert_eq!(tree_to_rules(&t).len(), t.internal_nodes());
    }

    #[test]
    fn replay_examples() {
        let g = Grammar::equations();
        assert_eq!(rules_to_string(&vec![3, 8].into(), &g).unwrap(), "1");
        let s = "3*x+exp(3)+exp(1)";
        let r = tree_to_rules(&parse(s, &g).unwrap());
        assert_eq!(rules_to_string(&r, &g).unwrap(), s);
    }

    #[test]
    fn replay_errors() {
        let g = Grammar::equations();
        assert_eq!(
            rules_to_string(&vec![0].into(), &g),
            Err(DerivationError::Incomplete { pending: 2 })
        );
        assert_eq!(
            rules_to_string(&vec![3, 7, 7].into(), &g),
            Err(DerivationError::Surplus { surplus: 1 })
        );
        assert!(matches!(
            rules_to_string(&vec![7].into(), &g),
            Err(DerivationError::LhsMismatch { step: 0, .. })
        ));
        assert!(matches!(
            rules_to_string(&vec![3, 11].into(), &g),
            Err(DerivationError::LhsMismatch { step: 1, .. })
        ));
    }

    #[test]
    fn onehot_padding_rows() {
        let g = Grammar::equations();
        let m = encode_onehot(&vec![3, 7].into(), &g, 4).unwrap();
        assert_eq!((m.rows(), m.cols(), m.true_length()), (4, 12, 2));
        assert_eq!(m.hot_indices(), vec![3, 7, 11, 11]);
        let full = encode_onehot(&vec![3, 7, 11, 11].into(), &g, 4);
        assert!(full.is_ok());
        assert_eq!(
            encode_onehot(&vec![0, 3, 7, 7, 7].into(), &g, 4),
            Err(DerivationError::TooLong { len: 5, t_max: 4 })
        );
    }

    #[test]
    fn decode_edge_cases() {
        let k = 12;
        let mut data = vec![0u8; 3 * k];
        for t in 0..3 {
            data[t * k + 11] = 1;
        }
        let pad = OneHotMatrix::from_raw(3, k, data.clone());
        assert_eq!(pad.true_length(), 0);
        assert!(decode_onehot(&pad).unwrap().is_empty());
        data[k + 2] = 1;
        let bad = OneHotMatrix::from_raw(3, k, data);
        assert_eq!(
            decode_onehot(&bad),
            Err(DerivationError::NotOneHot { row: 1 })
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn onehot_inverse(seq in proptest::collection::vec(0usize..11, 0..=15)) {
            let g = Grammar::equations();
            let r = RuleSequence(seq);
            let m = encode_onehot(&r, &g, 15).unwrap();
            prop_assert_eq!(m.true_length(), r.len());
            prop_assert_eq!(decode_onehot(&m).unwrap(), r);
        }
    }
}
