#![allow(dead_code)]

use std::path::PathBuf;

pub fn data_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("data")
        .join(name)
}

pub fn smiles_fixture() -> Vec<String> {
    std::fs::read_to_string(data_path("smiles_fixture.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

/// Hand-written recognizer for the bundled SMILES language, independent of
/// the grammar file and the chart parser.
pub struct SmilesOracle<'a> {
    s: &'a [u8],
    i: usize,
}

impl<'a> SmilesOracle<'a> {
    pub fn accepts(s: &str) -> bool {
        let mut p = SmilesOracle {
            s: s.as_bytes(),
            i: 0,
        };
        p.chain() && p.i == p.s.len()
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.i).copied()
    }

    fn peek_at(&self, k: usize) -> Option<u8> {
        self.s.get(self.i + k).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn digit(&mut self) -> bool {
        match self.peek() {
            Some(b'1'..=b'8') => {
                self.i += 1;
                true
            }
            _ => false,
        }
    }

    fn is_bond(c: Option<u8>) -> bool {
        matches!(c, Some(b'-' | b'=' | b'#' | b'/' | b'\\'))
    }

    fn organic(&mut self) -> bool {
        let two = (self.peek(), self.peek_at(1));
        if matches!(two, (Some(b'C'), Some(b'l')) | (Some(b'B'), Some(b'r'))) {
            self.i += 2;
            return true;
        }
        match self.peek() {
            Some(
                b'B' | b'C' | b'N' | b'O' | b'S' | b'P' | b'F' | b'I' | b'c' | b'n' | b'o' | b's',
            ) => {
                self.i += 1;
                true
            }
            _ => false,
        }
    }

    fn bracket(&mut self) -> bool {
        if !self.eat(b'[') {
            return false;
        }
        let mut n = 0;
        while n < 3 && self.digit() {
            n += 1;
        }
        if !self.organic() {
            return false;
        }
        if self.eat(b'@') {
            self.eat(b'@');
        }
        if self.eat(b'H') {
            self.digit();
        }
        if (self.eat(b'-') || self.eat(b'+')) && self.digit() {
            self.digit();
        }
        if self.eat(b':') && !self.digit() {
            return false;
        }
        self.eat(b']')
    }

    fn atom(&mut self) -> bool {
        if self.peek() == Some(b'[') {
            self.bracket()
        } else {
            self.organic()
        }
    }

    fn branched_atom(&mut self) -> bool {
        if !self.atom() {
            return false;
        }
        loop {
            if self.digit() {
                continue;
            }
            if Self::is_bond(self.peek()) && matches!(self.peek_at(1), Some(b'1'..=b'8')) {
                self.i += 2;
                continue;
            }
            break;
        }
        while self.eat(b'(') {
            if Self::is_bond(self.peek()) {
                self.i += 1;
            }
            if !self.chain() || !self.eat(b')') {
                return false;
            }
        }
        true
    }

    fn chain(&mut self) -> bool {
        if !self.branched_atom() {
            return false;
        }
        loop {
            match self.peek() {
                None | Some(b')') => return true,
                c if Self::is_bond(c) => {
                    self.i += 1;
                    if !self.branched_atom() {
                        return false;
                    }
                }
                _ => {
                    if !self.branched_atom() {
                        return false;
                    }
                }
            }
        }
    }
}

/// Every string of the equation table, by row: (text, expected valid).
pub const INTERPOLATION_TABLE: &[(&str, bool)] = &[
    ("3*x+exp(3)+exp(1)", true),
    ("2*2+exp(3)+exp(1)", true),
    ("3*1+exp(3)+exp(2)", true),
    ("2*1+exp3)+exp(2)", false),
    ("2*3+(x)+exp(x*3)", true),
    ("2*x+(2)+exp(x*3)", true),
    ("2*x+(1)+exp(x*x)", true),
    ("3*x+exp(3)+exp(1)", true),
    ("3*x+exp(x)+exp(1/2)", true),
    ("2*x+exp(x)+exp(1/2)", true),
    ("2*x+(x)+exp(1*x)", true),
    ("2*x+(x)+exp(x*x)", true),
    ("3*x+exp(1)+(x+3)", true),
    ("3*x+exp(3)+(x*3)", true),
    ("3*1+exp(3)+(2*1)", true),
    ("3*x+exp(3)+(2*1)", true),
    ("2*1+exp(3)+(x*2)", true),
    ("2*x+exp3)+xx(3)", false),
    ("2*2+3+exp(x*3)", true),
    ("2*3+exp(x)+(x)", true),
    ("2*3+x+(x+3)", true),
    ("2*3+x+(x/3)", true),
    ("2*2+3+(x*3)", true),
    ("x+1+exp(1)+sin(1*2)", true),
    ("1+3+exp(x)+(i*1)", false),
    ("3+1+exp(2)+(1*1)", true),
    ("x+2+exp(x)+(2*3)", true),
    ("x*3+exp(3)+(3*2)", true),
    ("3*3+sin(3)+(3*3)", true),
    ("x/1+exp(x)+sin(x*2)", true),
    ("x/x+sin(x)+exp(x*2)", true),
    ("3*x+sin(x)+(x*3)", true),
    ("3*x+sin(3)+(3*3)", true),
    ("3*x+sin(2)+(x*x)", true),
    ("x*1+exp(x)+ex*3)", false),
    ("x*2+exp(x)+ex*x)", false),
    ("x*2+exp(x)+(x*1)", true),
    ("x*3+exp(x)+(x*3)", true),
    ("x*1+exp(x)+(2*2)", true),
    ("3*x+sin(2)+(3*x)", true),
    ("3*x+exp(2)+(3*3)", true),
    ("3*x+exp(2)+(2*2)", true),
];
