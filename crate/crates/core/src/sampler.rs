//! Stack-masked decoding of a logit matrix into a rule sequence.
//!
//! The decoder simulates a pushdown automaton: it keeps a LIFO stack of
//! nonterminals, pops one per timestep, restricts row `t` of the logits to
//! the rules whose left-hand side is that nonterminal, picks a rule, and
//! pushes the rule's right-hand-side nonterminals so the leftmost ends on
//! top. Decoding completes when the stack empties; running out of rows with
//! a non-empty stack leaves the sequence exhausted (invalid).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grammar::{rules_to_string, Grammar, RuleSequence};
use crate::vae::LogitMatrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("mask admits no rule")]
    EmptyMask,
    #[error("logit row has {logits} entries but mask has {mask}")]
    LengthMismatch { logits: usize, mask: usize },
    #[error("logit matrix has {got} columns, grammar has {want} rules")]
    WrongWidth { got: usize, want: usize },
    #[error("max_len {max_len} exceeds the {rows} logit rows")]
    TooLong { max_len: usize, rows: usize },
    #[error("support enumeration exceeded {0} states")]
    TooManyStates(usize),
}

/// Softmax of `logits` restricted to the entries where `mask` is true.
///
/// Masked entries are exactly zero. The maximum unmasked logit is
/// subtracted before exponentiation.
pub fn masked_distribution(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, SamplerError> {
    if logits.len() != mask.len() {
        return Err(SamplerError::LengthMismatch {
            logits: logits.len(),
            mask: mask.len(),
        });
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&f, _)| f)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY && !mask.iter().any(|&m| m) {
        return Err(SamplerError::EmptyMask);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&f, &m)| if m { (f - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStatus {
    Running,
    Complete,
    Exhausted,
}

/// Stack machine state while decoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderState {
    pub stack: Vec<usize>,
    pub t: usize,
    pub emitted: RuleSequence,
    pub status: DecodeStatus,
}

impl DecoderState {
    pub fn new(g: &Grammar) -> Self {
        DecoderState {
            stack: vec![g.start()],
            t: 0,
            emitted: RuleSequence::default(),
            status: DecodeStatus::Running,
        }
    }

    /// Pops the top nonterminal, lets `choose` pick a rule from the masked
    /// distribution of `logits`, and pushes its rhs nonterminals.
    pub fn step(
        &mut self,
        g: &Grammar,
        logits: &[f64],
        choose: &mut impl FnMut(&[f64]) -> usize,
    ) -> Result<(), SamplerError> {
        let Some(alpha) = self.stack.pop() else {
            self.status = DecodeStatus::Complete;
            return Ok(());
        };
        let p = masked_distribution(logits, g.masks().mask(alpha))?;
        let k = choose(&p);
        debug_assert!(p[k] > 0.0 || g.masks().mask(alpha)[k]);
        self.emitted.0.push(k);
        self.stack.extend(g.rule(k).rhs_nonterminals().rev());
        self.t += 1;
        Ok(())
    }

    fn finish(&mut self, t_max: usize) {
        self.status = if self.stack.is_empty() {
            DecodeStatus::Complete
        } else if self.t >= t_max {
            DecodeStatus::Exhausted
        } else {
            DecodeStatus::Running
        };
    }
}

/// Outcome of decoding one logit matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decoded {
    pub rules: RuleSequence,
    pub status: DecodeStatus,
}

impl Decoded {
    pub fn is_complete(&self) -> bool {
        self.status == DecodeStatus::Complete
    }

    /// The derived string for complete decodes.
    pub fn text(&self, g: &Grammar) -> Option<String> {
        if self.is_complete() {
            rules_to_string(&self.rules, g).ok()
        } else {
            None
        }
    }
}

fn run(
    f: &LogitMatrix,
    g: &Grammar,
    mut choose: impl FnMut(&[f64]) -> usize,
) -> Result<Decoded, SamplerError> {
    if f.cols() != g.num_rules() {
        return Err(SamplerError::WrongWidth {
            got: f.cols(),
            want: g.num_rules(),
        });
    }
    let mut state = DecoderState::new(g);
    while !state.stack.is_empty() && state.t < f.rows() {
        let t = state.t;
        state.step(g, f.row(t), &mut choose)?;
    }
    state.finish(f.rows());
    Ok(Decoded {
        rules: state.emitted,
        status: state.status,
    })
}

/// Draws one rule sequence, sampling each step from the masked distribution.
pub fn sample_sequence<R: Rng + ?Sized>(
    f: &LogitMatrix,
    g: &Grammar,
    rng: &mut R,
) -> Result<Decoded, SamplerError> {
    run(f, g, |p| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, &pk) in p.iter().enumerate() {
            if pk > 0.0 {
                acc += pk;
                last = k;
                if u < acc {
                    return k;
                }
            }
        }
        last
    })
}

/// Deterministic decode taking the most probable admissible rule at each
/// step, ties going to the lowest rule index.
pub fn argmax_sequence(f: &LogitMatrix, g: &Grammar) -> Result<Decoded, SamplerError> {
    run(f, g, |p| {
        let mut best = 0;
        for (k, &pk) in p.iter().enumerate() {
            if pk > p[best] {
                best = k;
            }
        }
        best
    })
}

/// Exact distribution over decoder outcomes when decoding is limited to
/// `max_len` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportReport {
    pub completed: Vec<(RuleSequence, f64)>,
    pub exhausted_mass: f64,
    pub states_visited: usize,
}

impl SupportReport {
    pub fn total_mass(&self) -> f64 {
        self.completed.iter().map(|(_, p)| p).sum::<f64>() + self.exhausted_mass
    }
}

pub const MAX_SUPPORT_STATES: usize = 1_000_000;

/// Expands every derivation of at most `max_len` steps with its exact
/// probability under [`sample_sequence`] run on the first `max_len` rows.
pub fn enumerate_support(
    f: &LogitMatrix,
    g: &Grammar,
    max_len: usize,
) -> Result<SupportReport, SamplerError> {
    if f.cols() != g.num_rules() {
        return Err(SamplerError::WrongWidth {
            got: f.cols(),
            want: g.num_rules(),
        });
    }
    if max_len > f.rows() {
        return Err(SamplerError::TooLong {
            max_len,
            rows: f.rows(),
        });
    }
    let mut report = SupportReport {
        completed: Vec::new(),
        exhausted_mass: 0.0,
        states_visited: 0,
    };
    let mut pending = vec![(vec![g.start()], Vec::<usize>::new(), 1.0f64)];
    while let Some((mut stack, rules, prob)) = pending.pop() {
        report.states_visited += 1;
        if report.states_visited > MAX_SUPPORT_STATES {
            return Err(SamplerError::TooManyStates(MAX_SUPPORT_STATES));
        }
        let Some(alpha) = stack.pop() else {
            report.completed.push((RuleSequence(rules), prob));
            continue;
        };
        let t = rules.len();
        if t >= max_len {
            report.exhausted_mass += prob;
            continue;
        }
        let p = masked_distribution(f.row(t), g.masks().mask(alpha))?;
        for (k, &pk) in p.iter().enumerate() {
            if pk == 0.0 {
                continue;
            }
            let mut next_stack = stack.clone();
            next_stack.extend(g.rule(k).rhs_nonterminals().rev());
            let mut next_rules = rules.clone();
            next_rules.push(k);
            pending.push((next_stack, next_rules, prob * pk));
        }
    }
    report.completed.sort_by(|a, b| a.0 .0.cmp(&b.0 .0));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grammar::parse;
    use crate::grammar::tree_to_rules;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_logits(rows: usize, cols: usize, seed: u64) -> LogitMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        LogitMatrix::new(rows, cols, data).unwrap()
    }

    /// Logits that strongly prefer `prefs[t]` at step t.
    fn forced(rows: usize, cols: usize, prefs: &[usize]) -> LogitMatrix {
        let mut data = vec![0.0; rows * cols];
        for (t, &k) in prefs.iter().enumerate().take(rows) {
            data[t * cols + k] = 1e3;
        }
        LogitMatrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn masked_distribution_basics() {
        assert_eq!(
            masked_distribution(&[3.0, -1.0, 0.2], &[false, true, false]).unwrap(),
            vec![0.0, 1.0, 0.0]
        );
        assert_eq!(
            masked_distribution(&[0.0, 0.0, 5.0], &[true, true, false]).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        let f = [0.3, -1.2, 2.0, 0.7];
        let m = [true, true, false, true];
        let a = masked_distribution(&f, &m).unwrap();
        let shifted: Vec<f64> = f.iter().map(|v| v + 123.0).collect();
        let b = masked_distribution(&shifted, &m).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(
            masked_distribution(&[1.0, 2.0], &[false, false]),
            Err(SamplerError::EmptyMask)
        );
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let p = masked_distribution(&[1e308, 1e308, -1e308], &[true, true, true]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && p[2] == 0.0);
        let p = masked_distribution(&[f64::INFINITY, 0.0], &[false, true]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn smiles_first_rule_is_forced() {
        let g = Grammar::smiles();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let f = random_logits(40, g.num_rules(), seed);
            let d = sample_sequence(&f, &g, &mut rng).unwrap();
            assert_eq!(d.rules.0[0], 0);
            assert_eq!(argmax_sequence(&f, &g).unwrap().rules.0[0], 0);
        }
    }

    #[test]
    fn forced_trace_decodes_x() {
        let g = Grammar::equations();
        let f = forced(15, g.num_rules(), &[3, 7]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [
            argmax_sequence(&f, &g).unwrap(),
            sample_sequence(&f, &g, &mut rng).unwrap(),
        ] {
            assert_eq!(d.rules.0, vec![3, 7]);
            assert_eq!(d.status, DecodeStatus::Complete);
            assert_eq!(d.text(&g).as_deref(), Some("x"));
        }
    }

    #[test]
    fn self_expanding_rule_exhausts() {
        let g = Grammar::equations();
        let f = forced(15, g.num_rules(), &[0; 15]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in [
            argmax_sequence(&f, &g).unwrap(),
            sample_sequence(&f, &g, &mut rng).unwrap(),
        ] {
            assert_eq!(d.status, DecodeStatus::Exhausted);
            assert_eq!(d.rules.len(), 15);
            assert!(d.text(&g).is_none());
        }
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let g = Grammar::equations();
        let f = LogitMatrix::new(15, g.num_rules(), vec![0.0; 15 * 12]).unwrap();
        let d = argmax_sequence(&f, &g).unwrap();
        // S -> S '+' T forever
        assert!(d.rules.0.iter().all(|&k| k == 0));
    }

    #[test]
    fn complete_decodes_reparse() {
        let g = Grammar::equations();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut complete = 0;
        for seed in 0..300 {
            let f = random_logits(15, g.num_rules(), seed);
            let d = sample_sequence(&f, &g, &mut rng).unwrap();
            if let Some(s) = d.text(&g) {
                complete += 1;
                let back = tree_to_rules(&parse(&s, &g).unwrap());
                assert_eq!(back, d.rules);
            }
        }
        assert!(complete > 0);
    }

    #[test]
    fn sampler_is_seed_deterministic() {
        let g = Grammar::smiles();
        let f = random_logits(60, g.num_rules(), 5);
        let a = sample_sequence(&f, &g, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_sequence(&f, &g, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_terminal_support() {
        let g = Grammar::load("S -> 'a' | 'b'").unwrap();
        let f = LogitMatrix::new(2, 3, vec![0.5, -0.25, 9.0, 0.0, 0.0, 0.0]).unwrap();
        let rep = enumerate_support(&f, &g, 1).unwrap();
        let p = masked_distribution(f.row(0), g.masks().mask(g.start())).unwrap();
        assert_eq!(rep.completed.len(), 2);
        assert!((rep.completed[0].1 - p[0]).abs() < 1e-15);
        assert!((rep.completed[1].1 - p[1]).abs() < 1e-15);
        assert!((rep.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn equation_support_mass_is_one() {
        let g = Grammar::equations();
        let f = random_logits(4, g.num_rules(), 21);
        let rep = enumerate_support(&f, &g, 4).unwrap();
        assert!((rep.total_mass() - 1.0).abs() < 1e-12);
        for (r, _) in &rep.completed {
            assert!(rules_to_string(r, &g).is_ok());
        }
    }
}
