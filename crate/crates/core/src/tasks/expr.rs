use rand::seq::IndexedRandom;
use rand::Rng;
use thiserror::Error;

use crate::grammar::{
    parse, rules_to_string, Grammar, ParseError, ParseTree, RuleSequence, Symbol,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("production `{0}` has no arithmetic meaning")]
    UnknownProduction(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExpressionAst {
    Binary(BinOp, Box<ExpressionAst>, Box<ExpressionAst>),
    Sin(Box<ExpressionAst>),
    Exp(Box<ExpressionAst>),
    X,
    Const(f64),
}

impl ExpressionAst {
    /// Builds the tree from an equation-grammar parse; parentheses and unit
    /// productions disappear.
    pub fn from_parse(tree: &ParseTree, g: &Grammar) -> Result<Self, ExprError> {
        let text = |t: &ParseTree| match t.symbol {
            Symbol::Terminal(i) => Some(g.terminals()[i].as_str()),
            Symbol::Nonterminal(_) => None,
        };
        let c = &tree.children;
        let unknown = || {
            ExprError::UnknownProduction(match tree.rule {
                Some(r) => g.display_rule(r).to_string(),
                None => format!("{:?}", tree.symbol),
            })
        };
        match c.len() {
            1 => match text(&c[0]) {
                None => Self::from_parse(&c[0], g),
                Some("x") => Ok(ExpressionAst::X),
                Some(lit) => lit.parse().map(ExpressionAst::Const).map_err(|_| unknown()),
            },
            3 => match (text(&c[0]), text(&c[1]), text(&c[2])) {
                (None, Some(op), None) => {
                    let op = match op {
                        "+" => BinOp::Add,
                        "*" => BinOp::Mul,
                        "/" => BinOp::Div,
                        _ => return Err(unknown()),
                    };
                    Ok(ExpressionAst::Binary(
                        op,
                        Box::new(Self::from_parse(&c[0], g)?),
                        Box::new(Self::from_parse(&c[2], g)?),
                    ))
                }
                (Some(open), None, Some(")")) => {
                    let inner = Self::from_parse(&c[1], g)?;
                    match open {
                        "(" => Ok(inner),
                        "sin(" => Ok(ExpressionAst::Sin(Box::new(inner))),
                        "exp(" => Ok(ExpressionAst::Exp(Box::new(inner))),
                        _ => Err(unknown()),
                    }
                }
                _ => Err(unknown()),
            },
            _ => Err(unknown()),
        }
    }

    pub fn parse(s: &str, g: &Grammar) -> Result<Self, ExprError> {
        Self::from_parse(&parse(s, g)?, g)
    }

    /// IEEE evaluation; division by zero and overflow yield non-finite values.
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            ExpressionAst::Binary(op, a, b) => {
                let (a, b) = (a.eval(x), b.eval(x));
                match op {
                    BinOp::Add => a + b,
                    BinOp::Mul => a * b,
                    BinOp::Div => a / b,
                }
            }
            ExpressionAst::Sin(a) => a.eval(x).sin(),
            ExpressionAst::Exp(a) => a.eval(x).exp(),
            ExpressionAst::X => x,
            ExpressionAst::Const(c) => *c,
        }
    }
}

/// Evaluates an equation-grammar string at every point of `xs`.
pub fn eval_expression(s: &str, xs: &[f64], g: &Grammar) -> Result<Vec<f64>, ExprError> {
    let ast = ExpressionAst::parse(s, g)?;
    Ok(xs.iter().map(|&x| ast.eval(x)).collect())
}

pub const TRUE_FUNCTION: &str = "1/3+x+sin(x*x)";

/// Target curve for the symbolic-regression score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreDataset {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl ScoreDataset {
    /// 1000 evenly spaced points on [-10, 10] of `1/3 + x + sin(x*x)`.
    pub fn standard() -> Self {
        let n = 1000;
        let xs: Vec<f64> = (0..n)
            .map(|i| -10.0 + 20.0 * i as f64 / (n - 1) as f64)
            .collect();
        let ys = xs.iter().map(|&x| 1.0 / 3.0 + x + (x * x).sin()).collect();
        ScoreDataset { xs, ys }
    }
}

/// `log(1 + MSE)` of `s` against `d`, or `None` when `s` does not parse
/// or its error is not finite.
pub fn expression_score(s: &str, d: &ScoreDataset, g: &Grammar) -> Option<f64> {
    let ys = eval_expression(s, &d.xs, g).ok()?;
    let mse = ys
        .iter()
        .zip(&d.ys)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / d.xs.len() as f64;
    mse.is_finite().then(|| mse.ln_1p())
}

/// Draws a derivation by picking uniformly among the admissible rules at
/// each step, restarting whenever it grows past `max_rules`.
pub fn random_derivation<R: Rng + ?Sized>(
    g: &Grammar,
    max_rules: usize,
    rng: &mut R,
) -> RuleSequence {
    'attempt: loop {
        let mut stack = vec![g.start()];
        let mut rules = Vec::new();
        while let Some(nt) = stack.pop() {
            if rules.len() == max_rules {
                continue 'attempt;
            }
            let &k = g
                .rules_for(nt)
                .choose(rng)
                .expect("every nonterminal has a rule");
            rules.push(k);
            stack.extend(g.rule(k).rhs_nonterminals().rev());
        }
        return RuleSequence(rules);
    }
}

/// `n` random strings whose derivations use at most `max_rules` rules.
pub fn gen_expressions<R: Rng + ?Sized>(
    n: usize,
    max_rules: usize,
    g: &Grammar,
    rng: &mut R,
) -> Vec<String> {
    assert!(max_rules >= 2, "max_rules must be at least 2");
    (0..n)
        .map(|_| {
            let r = random_derivation(g, max_rules, rng);
            rules_to_string(&r, g).expect("sampled derivations are complete")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::tree_to_rules;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    #[test]
    fn evaluation_examples() {
        let g = Grammar::equations();
        let v = eval_expression(TRUE_FUNCTION, &[0.0], &g).unwrap();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15);
        let v = eval_expression("sin(2)", &[-4.0, 7.5], &g).unwrap();
        assert!(v
            .iter()
            .all(|&y| (y - 0.909_297_426_825_681_7).abs() < 1e-15));
        let v = eval_expression("x/2*exp(x)/exp(2*x)", &[0.0], &g).unwrap();
        assert_eq!(v[0], 0.0);
    }

    #[test]
    fn left_associative() {
        let g = Grammar::equations();
        assert_eq!(eval_expression("3/3/3", &[0.0], &g).unwrap()[0], 1.0 / 3.0);
        assert_eq!(eval_expression("1+2*3", &[0.0], &g).unwrap()[0], 9.0);
        assert_eq!(eval_expression("1+(2*3)", &[0.0], &g).unwrap()[0], 7.0);
    }

    #[test]
    fn ieee_semantics() {
        let g = Grammar::equations();
        let v = eval_expression("1/(x+x)", &[0.0], &g).unwrap();
        assert_eq!(v[0], f64::INFINITY);
        let v = eval_expression("exp(exp(x))", &[10.0], &g).unwrap();
        assert_eq!(v[0], f64::INFINITY);
        assert!(eval_expression("x+", &[0.0], &g).is_err());
    }

    #[test]
    fn scores() {
        let g = Grammar::equations();
        let d = ScoreDataset::standard();
        assert_eq!(d.xs.len(), 1000);
        assert_eq!((d.xs[0], d.xs[999]), (-10.0, 10.0));
        assert!(expression_score(TRUE_FUNCTION, &d, &g).unwrap().abs() < 1e-12);
        assert!(expression_score("exp(exp(exp(x)))", &d, &g).is_none());
        assert!(expression_score("sin(", &d, &g).is_none());
        for s in ["x", "1", "x*x*x", "sin(x)/3"] {
            assert!(expression_score(s, &d, &g).unwrap() >= 0.0);
        }
    }

    #[test]
    fn generator_respects_limit() {
        let g = Grammar::equations();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in gen_expressions(300, 15, &g, &mut rng) {
            let r = tree_to_rules(&parse(&s, &g).unwrap());
            assert!(r.len() <= 15);
        }
    }

    #[test]
    fn two_rule_strings() {
        let g = Grammar::equations();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let set: BTreeSet<String> = gen_expressions(400, 2, &g, &mut rng).into_iter().collect();
        let want: BTreeSet<String> = ["x", "1", "2", "3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(set, want);
    }

    #[test]
    fn generator_is_seeded() {
        let g = Grammar::equations();
        let a = gen_expressions(50, 15, &g, &mut ChaCha8Rng::seed_from_u64(5));
        let b = gen_expressions(50, 15, &g, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }
}
