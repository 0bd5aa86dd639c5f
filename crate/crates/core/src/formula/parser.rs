//! Text syntax for formulas.
//!
//! ```text
//! spec     := [ "event" [ "@" INT ] "=>" ] formula
//! formula  := conj { "|" conj }
//! conj     := unary { "&" unary }
//! unary    := "F" interval unary | "G" interval unary | operand [ "U" interval unary ]
//! operand  := "!" pred | pred | "(" formula ")"
//! interval := "[" number "," number "]"      number = INT | DECIMAL [ "s" ]
//! pred     := "p" INT                         (1-based)
//! ```
//!
//! Interval bounds suffixed with `s` are seconds and are converted to steps with the
//! sampling period; unsuffixed bounds use the default units of [`ParseOptions`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Formula, Interval, Literal, Mode, Specification};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("parse error at column {}: {message}", position + 1)]
pub struct ParseError {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalUnits {
    #[default]
    Steps,
    Seconds,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParseOptions {
    pub units: IntervalUnits,
    /// Sampling period in seconds, needed when any bound is given in seconds.
    pub sampling_period: Option<f64>,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { units: IntervalUnits::Steps, sampling_period: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Pred(usize),
    Num { value: f64, text: String, seconds: bool },
    Ident(String),
    Not,
    And,
    Or,
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    At,
    Implies,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn tokens(src: &'a str) -> Result<Vec<(usize, Tok)>, ParseError> {
        let mut lx = Lexer { src, pos: 0 };
        let mut out = Vec::new();
        while let Some(t) = lx.next_token()? {
            out.push(t);
        }
        Ok(out)
    }

    fn err(&self, position: usize, message: impl Into<String>) -> ParseError {
        ParseError { position, message: message.into() }
    }

    fn next_token(&mut self) -> Result<Option<(usize, Tok)>, ParseError> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && (bytes[self.pos] as char).is_whitespace() {
            self.pos += 1;
        }
        if self.pos >= bytes.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = bytes[start] as char;
        let single = match c {
            '!' | '~' => Some(Tok::Not),
            '&' => Some(Tok::And),
            '|' => Some(Tok::Or),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            '[' => Some(Tok::LBracket),
            ']' => Some(Tok::RBracket),
            ',' => Some(Tok::Comma),
            '@' => Some(Tok::At),
            _ => None,
        };
        if let Some(t) = single {
            self.pos += 1;
            return Ok(Some((start, t)));
        }
        if c == '=' {
            if self.src[start..].starts_with("=>") {
                self.pos += 2;
                return Ok(Some((start, Tok::Implies)));
            }
            return Err(self.err(start, "expected '=>'"));
        }
        if c.is_ascii_digit() || c == '.' {
            while self.pos < bytes.len() && (bytes[self.pos].is_ascii_digit() || bytes[self.pos] == b'.') {
                self.pos += 1;
            }
            let text = self.src[start..self.pos].to_string();
            let value: f64 = text.parse().map_err(|_| self.err(start, format!("bad number '{text}'")))?;
            let seconds = self.pos < bytes.len()
                && bytes[self.pos] == b's'
                && !(self.pos + 1 < bytes.len() && (bytes[self.pos + 1] as char).is_ascii_alphanumeric());
            if seconds {
                self.pos += 1;
            }
            return Ok(Some((start, Tok::Num { value, text, seconds })));
        }
        if c.is_ascii_alphabetic() || c == '_' {
            while self.pos < bytes.len() && ((bytes[self.pos] as char).is_ascii_alphanumeric() || bytes[self.pos] == b'_')
            {
                self.pos += 1;
            }
            let word = &self.src[start..self.pos];
            if let Some(digits) = word.strip_prefix('p') {
                if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
                    let n: usize = digits.parse().map_err(|_| self.err(start, "predicate index too large"))?;
                    if n == 0 {
                        return Err(self.err(start, "predicates are numbered from p1"));
                    }
                    return Ok(Some((start, Tok::Pred(n - 1))));
                }
            }
            return Ok(Some((start, Tok::Ident(word.to_string()))));
        }
        Err(self.err(start, format!("unexpected character '{c}'")))
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
    opts: ParseOptions,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError { position: self.pos(), message: message.into() }
    }

    fn expect(&mut self, want: Tok, what: &str) -> Result<(), ParseError> {
        if self.peek() == Some(&want) {
            self.at += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(w)) if w == kw)
    }

    fn specification(&mut self) -> Result<Specification, ParseError> {
        let mode = if self.is_keyword("event") {
            self.at += 1;
            let trigger = if self.peek() == Some(&Tok::At) {
                self.at += 1;
                match self.peek() {
                    Some(&Tok::Num { value, seconds: false, .. }) if value.fract() == 0.0 && value >= 0.0 => {
                        self.at += 1;
                        value as u32
                    }
                    _ => return Err(self.err("expected a non-negative integer step after '@'")),
                }
            } else {
                0
            };
            self.expect(Tok::Implies, "'=>'")?;
            Mode::OneTime { trigger }
        } else {
            Mode::AllTime
        };
        let body = self.formula()?;
        if self.at < self.toks.len() {
            return Err(self.err("unexpected trailing input"));
        }
        Ok(Specification { mode, body })
    }

    fn formula(&mut self) -> Result<Formula, ParseError> {
        let mut parts = vec![self.conj()?];
        while self.peek() == Some(&Tok::Or) {
            self.at += 1;
            parts.push(self.conj()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::Or(parts) })
    }

    fn conj(&mut self) -> Result<Formula, ParseError> {
        let mut parts = vec![self.unary()?];
        while self.peek() == Some(&Tok::And) {
            self.at += 1;
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::And(parts) })
    }

    fn unary(&mut self) -> Result<Formula, ParseError> {
        if self.is_keyword("F") || self.is_keyword("G") {
            let always = self.is_keyword("G");
            self.at += 1;
            let interval = self.interval()?;
            let child = self.unary()?;
            return Ok(if always {
                Formula::always(child, interval)
            } else {
                Formula::eventually(child, interval)
            });
        }
        let lhs = self.operand()?;
        if self.is_keyword("U") {
            self.at += 1;
            let interval = self.interval()?;
            let rhs = self.unary()?;
            return Ok(Formula::until(lhs, rhs, interval));
        }
        Ok(lhs)
    }

    fn operand(&mut self) -> Result<Formula, ParseError> {
        match self.peek() {
            Some(Tok::Not) => {
                self.at += 1;
                match self.peek() {
                    Some(&Tok::Pred(i)) => {
                        self.at += 1;
                        Ok(Formula::Predicate(Literal::negated(i)))
                    }
                    _ => Err(self.err("negation applies only to predicates")),
                }
            }
            Some(Tok::Pred(i)) => {
                let i = *i;
                self.at += 1;
                Ok(Formula::pred(i))
            }
            Some(Tok::LParen) => {
                self.at += 1;
                let f = self.formula()?;
                self.expect(Tok::RParen, "')'")?;
                Ok(f)
            }
            Some(_) => Err(self.err("expected a predicate, '!', '(' or a temporal operator")),
            None => Err(self.err("unexpected end of input")),
        }
    }

    fn interval(&mut self) -> Result<Interval, ParseError> {
        let start = self.pos();
        self.expect(Tok::LBracket, "'['")?;
        let lo = self.bound()?;
        self.expect(Tok::Comma, "','")?;
        let hi = self.bound()?;
        self.expect(Tok::RBracket, "']'")?;
        Interval::new(lo, hi).map_err(|e| ParseError { position: start, message: e.to_string() })
    }

    fn bound(&mut self) -> Result<u32, ParseError> {
        let position = self.pos();
        let Some(Tok::Num { value, text, seconds }) = self.peek().cloned() else {
            return Err(self.err("expected a number"));
        };
        self.at += 1;
        let err = |message: String| ParseError { position, message };
        let in_seconds = seconds || self.opts.units == IntervalUnits::Seconds;
        let steps = if in_seconds {
            let ts = self
                .opts
                .sampling_period
                .ok_or_else(|| err(format!("bound '{text}' is in seconds but no sampling period is set")))?;
            let ratio = value / ts;
            let rounded = ratio.round();
            if (ratio - rounded).abs() > 1e-9 * ratio.abs().max(1.0) {
                return Err(err(format!("{value} s is not a whole number of {ts} s sampling periods")));
            }
            rounded
        } else {
            if value.fract() != 0.0 {
                return Err(err(format!("step bound '{text}' must be an integer")));
            }
            value
        };
        if steps > u32::MAX as f64 {
            return Err(err(format!("bound '{text}' is too large")));
        }
        Ok(steps as u32)
    }
}

fn parser(src: &str, opts: ParseOptions) -> Result<Parser, ParseError> {
    if let Some(ts) = opts.sampling_period {
        if !(ts.is_finite() && ts > 0.0) {
            return Err(ParseError { position: 0, message: format!("invalid sampling period {ts}") });
        }
    }
    Ok(Parser { toks: Lexer::tokens(src)?, at: 0, end: src.len(), opts })
}

/// Parses a formula body (no `event =>` prefix).
pub fn parse_formula(src: &str, opts: ParseOptions) -> Result<Formula, ParseError> {
    let mut p = parser(src, opts)?;
    let f = p.formula()?;
    if p.at < p.toks.len() {
        return Err(p.err("unexpected trailing input"));
    }
    Ok(f)
}

/// Parses a specification, accepting an optional `event =>` or `event@k =>` prefix.
pub fn parse_specification(src: &str, opts: ParseOptions) -> Result<Specification, ParseError> {
    parser(src, opts)?.specification()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn steps(src: &str) -> Formula {
        parse_formula(src, ParseOptions::default()).unwrap()
    }

    fn iv(a: u32, b: u32) -> Interval {
        Interval::new(a, b).unwrap()
    }

    #[test]
    fn parses_until() {
        assert_eq!(steps("p1 U[0,2] p2"), Formula::until(Formula::pred(0), Formula::pred(1), iv(0, 2)));
    }

    #[test]
    fn precedence_and_binds_tighter_than_or() {
        let f = steps("F[0,1] p1 & G[0,2] p2 | F[1,1] !p3");
        let expected = Formula::or(vec![
            Formula::and(vec![
                Formula::eventually(Formula::pred(0), iv(0, 1)),
                Formula::always(Formula::pred(1), iv(0, 2)),
            ]),
            Formula::eventually(Formula::not_pred(2), iv(1, 1)),
        ]);
        assert_eq!(f, expected);
    }

    #[test]
    fn temporal_operand_takes_parenthesized_box() {
        let f = steps("F[5,25] (p1 & p2 & p3)");
        let expected = Formula::eventually(
            Formula::and(vec![Formula::pred(0), Formula::pred(1), Formula::pred(2)]),
            iv(5, 25),
        );
        assert_eq!(f, expected);
    }

    #[test]
    fn seconds_are_converted_with_sampling_period() {
        let opts = ParseOptions { units: IntervalUnits::Steps, sampling_period: Some(0.5) };
        let f = parse_formula("F[5s,25s] p1", opts).unwrap();
        assert_eq!(f, Formula::eventually(Formula::pred(0), iv(10, 50)));
        let opts = ParseOptions { units: IntervalUnits::Seconds, sampling_period: Some(0.5) };
        let f = parse_formula("G[0,25] p1", opts).unwrap();
        assert_eq!(f, Formula::always(Formula::pred(0), iv(0, 50)));
    }

    #[test]
    fn seconds_must_align_with_samples() {
        let opts = ParseOptions { units: IntervalUnits::Seconds, sampling_period: Some(0.5) };
        assert!(parse_formula("F[0,1.25] p1", opts).is_err());
        assert!(parse_formula("F[0s,1s] p1", ParseOptions::default()).is_err());
    }

    #[test]
    fn one_time_prefix() {
        let s = parse_specification("event => F[1,2] p1", ParseOptions::default()).unwrap();
        assert_eq!(s.mode, Mode::OneTime { trigger: 0 });
        let s = parse_specification("event@7 => F[1,2] p1", ParseOptions::default()).unwrap();
        assert_eq!(s.mode, Mode::OneTime { trigger: 7 });
        let s = parse_specification("F[1,2] p1", ParseOptions::default()).unwrap();
        assert_eq!(s.mode, Mode::AllTime);
    }

    #[test]
    fn rejects_bad_input() {
        let bad = [
            "",
            "p0",
            "!(p1 & p2)",
            "!F[0,1] p1",
            "F[2,1] p1",
            "F[0,1]",
            "p1 U p2",
            "p1 &",
            "(p1",
            "p1 p2",
            "F[0,1.5] p1",
            "q1",
            "p1 # p2",
        ];
        for src in bad {
            assert!(parse_formula(src, ParseOptions::default()).is_err(), "accepted {src:?}");
        }
    }

    #[test]
    fn error_reports_column() {
        let e = parse_formula("p1 & !F[0,1] p2", ParseOptions::default()).unwrap_err();
        assert_eq!(e.position, 6);
    }

    fn arb_interval() -> impl Strategy<Value = Interval> {
        (0u32..20, 0u32..20).prop_map(|(a, d)| Interval::new(a, a + d).unwrap())
    }

    fn arb_formula() -> impl Strategy<Value = Formula> {
        let leaf = (0usize..9, any::<bool>()).prop_map(|(i, n)| Formula::Predicate(Literal { index: i, negated: n }));
        leaf.prop_recursive(4, 32, 3, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 2..4).prop_map(Formula::And),
                prop::collection::vec(inner.clone(), 2..4).prop_map(Formula::Or),
                (inner.clone(), inner.clone(), arb_interval()).prop_map(|(l, r, i)| Formula::until(l, r, i)),
                (inner.clone(), arb_interval()).prop_map(|(c, i)| Formula::eventually(c, i)),
                (inner, arb_interval()).prop_map(|(c, i)| Formula::always(c, i)),
            ]
        })
    }

    proptest! {
        #[test]
        fn print_then_parse_is_identity(f in arb_formula()) {
            let text = f.to_string();
            let back = parse_formula(&text, ParseOptions::default()).unwrap();
            prop_assert_eq!(back, f);
        }
    }
}
