//! Expert risk rules.
//!
//! ```text
//! # comment
//! rule "late_payer" code 4 quadrant financial: payment_delay > 20
//! rule "locked_out" code 7 quadrant structural: contract == "monthly" AND tenure <= 6
//! ```
//!
//! Numeric conditions are stored with the `(<=, >)` pair only: `x < t` is
//! kept as `x <= t'` and `x >= t` as `x > t'`, where `t'` is the largest
//! float below `t`. Both rewrites are exact over the reals representable as
//! `f64`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binarizer::{AtomicPredicate, Comparator};
use crate::data::{FeatureKind, FeatureSchema, Record};
use crate::error::{Error, Result};

pub const MIN_RISK_CODE: u8 = 4;
pub const MAX_RISK_CODE: u8 = 11;
pub const MAX_CONDITIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrant {
    Financial,
    Structural,
    Interaction,
    Engagement,
}

impl fmt::Display for Quadrant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quadrant::Financial => "financial",
            Quadrant::Structural => "structural",
            Quadrant::Interaction => "interaction",
            Quadrant::Engagement => "engagement",
        })
    }
}

impl FromStr for Quadrant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "financial" => Ok(Quadrant::Financial),
            "structural" => Ok(Quadrant::Structural),
            "interaction" => Ok(Quadrant::Interaction),
            "engagement" => Ok(Quadrant::Engagement),
            other => Err(format!("unknown quadrant `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRule {
    pub name: String,
    pub code: u8,
    pub quadrant: Quadrant,
    pub predicate: Vec<AtomicPredicate>,
}

impl RiskRule {
    /// Conjunction truth value on a raw record; stops at the first false
    /// condition.
    pub fn evaluate(&self, record: &Record<'_>) -> Result<bool> {
        for cond in &self.predicate {
            if !cond.evaluate(record)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn condition_string(&self) -> String {
        self.predicate
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" AND ")
    }
}

impl fmt::Display for RiskRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rule {:?} code {} quadrant {}: {}",
            self.name,
            self.code,
            self.quadrant,
            self.condition_string()
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RiskRuleSet {
    rules: Vec<RiskRule>,
}

impl RiskRuleSet {
    pub fn new(rules: Vec<RiskRule>) -> Result<Self> {
        let mut codes = HashSet::new();
        let mut names = HashSet::new();
        for r in &rules {
            if !(MIN_RISK_CODE..=MAX_RISK_CODE).contains(&r.code) {
                return Err(Error::Config(format!("rule `{}`: code {} outside 4..=11", r.name, r.code)));
            }
            if r.predicate.is_empty() || r.predicate.len() > MAX_CONDITIONS {
                return Err(Error::Config(format!(
                    "rule `{}` must have 1..={MAX_CONDITIONS} conditions",
                    r.name
                )));
            }
            if !codes.insert(r.code) {
                return Err(Error::Config(format!("duplicate code {}", r.code)));
            }
            if !names.insert(r.name.as_str()) {
                return Err(Error::Config(format!("duplicate rule name `{}`", r.name)));
            }
        }
        Ok(Self { rules })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn rules(&self) -> &[RiskRule] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Rules in evaluation precedence order (ascending code).
    pub fn by_precedence(&self) -> Vec<&RiskRule> {
        let mut rules: Vec<&RiskRule> = self.rules.iter().collect();
        rules.sort_by_key(|r| r.code);
        rules
    }

    /// Keeps only rules whose names are listed, preserving order.
    pub fn retain_names(&self, names: &[String]) -> Self {
        Self {
            rules: self
                .rules
                .iter()
                .filter(|r| names.contains(&r.name))
                .cloned()
                .collect(),
        }
    }

    /// Checks every referenced feature exists in `schema` with a kind that
    /// matches its comparator.
    pub fn bind(&self, schema: &FeatureSchema) -> Result<()> {
        for rule in &self.rules {
            for cond in &rule.predicate {
                let feature = schema.feature(&cond.feature).ok_or_else(|| {
                    Error::RuleBinding(format!(
                        "rule `{}` references unknown feature `{}`",
                        rule.name, cond.feature
                    ))
                })?;
                let ok = match feature.kind {
                    FeatureKind::Numeric => cond.comparator.is_numeric(),
                    FeatureKind::Categorical => !cond.comparator.is_numeric(),
                };
                if !ok {
                    return Err(Error::RuleBinding(format!(
                        "rule `{}`: `{cond}` does not fit {:?} feature `{}`",
                        rule.name, feature.kind, feature.name
                    )));
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for RiskRuleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for rule in &self.rules {
            writeln!(f, "{rule}")?;
        }
        Ok(())
    }
}

impl FromStr for RiskRuleSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Colon,
    Op(&'static str),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn syntax(line: usize, col: usize, message: impl Into<String>) -> Error {
    Error::RuleSyntax {
        line,
        column: col,
        message: message.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = src.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (start_line, start_col) = (line, col);
        let advance = |i: &mut usize, col: &mut usize, n: usize| {
            *i += n;
            *col += n;
        };
        match c {
            '\n' => {
                i += 1;
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => advance(&mut i, &mut col, 1),
            '#' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
            }
            ':' => {
                out.push(Token {
                    tok: Tok::Colon,
                    line,
                    col,
                });
                advance(&mut i, &mut col, 1);
            }
            '<' | '>' | '=' | '!' => {
                let two = chars.get(i + 1) == Some(&'=');
                let op = match (c, two) {
                    ('<', true) => "<=",
                    ('<', false) => "<",
                    ('>', true) => ">=",
                    ('>', false) => ">",
                    ('=', true) => "==",
                    ('!', true) => "!=",
                    _ => return Err(syntax(line, col, format!("unexpected `{c}`"))),
                };
                out.push(Token {
                    tok: Tok::Op(op),
                    line,
                    col,
                });
                advance(&mut i, &mut col, if two { 2 } else { 1 });
            }
            '"' => {
                let mut s = String::new();
                advance(&mut i, &mut col, 1);
                loop {
                    match chars.get(i) {
                        None | Some('\n') => {
                            return Err(syntax(start_line, start_col, "unterminated string"))
                        }
                        Some('"') => {
                            advance(&mut i, &mut col, 1);
                            break;
                        }
                        Some('\\') => {
                            let esc = chars.get(i + 1).copied();
                            s.push(match esc {
                                Some('"') => '"',
                                Some('\\') => '\\',
                                Some('n') => '\n',
                                Some('t') => '\t',
                                _ => return Err(syntax(line, col, "invalid escape")),
                            });
                            advance(&mut i, &mut col, 2);
                        }
                        Some(&ch) => {
                            s.push(ch);
                            advance(&mut i, &mut col, 1);
                        }
                    }
                }
                out.push(Token {
                    tok: Tok::Str(s),
                    line: start_line,
                    col: start_col,
                });
            }
            c if c.is_ascii_digit() || c == '-' || c == '+' || c == '.' => {
                let mut j = i + 1;
                while j < chars.len()
                    && (chars[j].is_ascii_alphanumeric()
                        || chars[j] == '.'
                        || ((chars[j] == '-' || chars[j] == '+')
                            && matches!(chars[j - 1], 'e' | 'E')))
                {
                    j += 1;
                }
                let text: String = chars[i..j].iter().collect();
                let v: f64 = text
                    .parse()
                    .map_err(|_| syntax(line, col, format!("invalid number `{text}`")))?;
                if !v.is_finite() {
                    return Err(syntax(line, col, format!("non-finite number `{text}`")));
                }
                out.push(Token {
                    tok: Tok::Num(v),
                    line,
                    col,
                });
                let step = j - i;
                advance(&mut i, &mut col, step);
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut j = i + 1;
                while j < chars.len() && (chars[j].is_alphanumeric() || chars[j] == '_') {
                    j += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[i..j].iter().collect()),
                    line,
                    col,
                });
                let step = j - i;
                advance(&mut i, &mut col, step);
            }
            other => return Err(syntax(line, col, format!("unexpected character `{other}`"))),
        }
    }
    out.push(Token {
        tok: Tok::Eof,
        line,
        col,
    });
    Ok(out)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.tokens[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.tokens[self.pos].clone();
        if t.tok != Tok::Eof {
            self.pos += 1;
        }
        t
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s == kw)
    }

    fn keyword(&mut self, kw: &str) -> Result<Token> {
        let t = self.next();
        match &t.tok {
            Tok::Ident(s) if s == kw => Ok(t),
            other => Err(syntax(t.line, t.col, format!("expected `{kw}`, found {}", describe(other)))),
        }
    }

    fn rule(&mut self) -> Result<(RiskRule, usize)> {
        let start = self.keyword("rule")?;
        let t = self.next();
        let name = match t.tok {
            Tok::Str(s) if !s.is_empty() => s,
            other => return Err(syntax(t.line, t.col, format!("expected rule name string, found {}", describe(&other)))),
        };
        self.keyword("code")?;
        let t = self.next();
        let code = match t.tok {
            Tok::Num(v) if v.fract() == 0.0 => v,
            other => return Err(syntax(t.line, t.col, format!("expected integer code, found {}", describe(&other)))),
        };
        if !(f64::from(MIN_RISK_CODE)..=f64::from(MAX_RISK_CODE)).contains(&code) {
            return Err(syntax(t.line, t.col, format!("code {code} outside 4..=11")));
        }
        self.keyword("quadrant")?;
        let t = self.next();
        let quadrant = match &t.tok {
            Tok::Ident(s) => s.parse::<Quadrant>().map_err(|e| syntax(t.line, t.col, e))?,
            other => return Err(syntax(t.line, t.col, format!("expected quadrant, found {}", describe(other)))),
        };
        let t = self.next();
        if t.tok != Tok::Colon {
            return Err(syntax(t.line, t.col, format!("expected `:`, found {}", describe(&t.tok))));
        }
        let mut predicate = vec![self.cond()?];
        while self.is_keyword("AND") {
            let and = self.next();
            if predicate.len() == MAX_CONDITIONS {
                return Err(syntax(and.line, and.col, format!("at most {MAX_CONDITIONS} conditions per rule")));
            }
            predicate.push(self.cond()?);
        }
        Ok((
            RiskRule {
                name,
                code: code as u8,
                quadrant,
                predicate,
            },
            start.line,
        ))
    }

    fn cond(&mut self) -> Result<AtomicPredicate> {
        let t = self.next();
        let feature = match t.tok {
            Tok::Ident(s) if !matches!(s.as_str(), "AND" | "rule") => s,
            other => return Err(syntax(t.line, t.col, format!("expected feature name, found {}", describe(&other)))),
        };
        let op_tok = self.next();
        let op = match op_tok.tok {
            Tok::Op(op) => op,
            other => return Err(syntax(op_tok.line, op_tok.col, format!("expected comparison, found {}", describe(&other)))),
        };
        let lit = self.next();
        let pred = match (op, lit.tok) {
            ("==", Tok::Str(s)) => AtomicPredicate::categorical(feature, Comparator::Eq, s),
            ("!=", Tok::Str(s)) => AtomicPredicate::categorical(feature, Comparator::Ne, s),
            ("<=", Tok::Num(v)) => AtomicPredicate::numeric(feature, Comparator::Le, v),
            (">", Tok::Num(v)) => AtomicPredicate::numeric(feature, Comparator::Gt, v),
            ("<", Tok::Num(v)) => AtomicPredicate::numeric(feature, Comparator::Le, v.next_down()),
            (">=", Tok::Num(v)) => AtomicPredicate::numeric(feature, Comparator::Gt, v.next_down()),
            ("==" | "!=", other) => {
                return Err(syntax(lit.line, lit.col, format!("`{op}` needs a string literal, found {}", describe(&other))))
            }
            (_, other) => {
                return Err(syntax(lit.line, lit.col, format!("`{op}` needs a numeric literal, found {}", describe(&other))))
            }
        };
        Ok(pred)
    }
}

fn describe(tok: &Tok) -> String {
    match tok {
        Tok::Ident(s) => format!("`{s}`"),
        Tok::Str(s) => format!("string {s:?}"),
        Tok::Num(v) => format!("number {v}"),
        Tok::Colon => "`:`".into(),
        Tok::Op(op) => format!("`{op}`"),
        Tok::Eof => "end of input".into(),
    }
}

/// Parses a rule file. A file containing only comments is an empty set.
pub fn parse(source: &str) -> Result<RiskRuleSet> {
    let mut parser = Parser {
        tokens: lex(source)?,
        pos: 0,
    };
    let mut rules: Vec<RiskRule> = Vec::new();
    while parser.peek().tok != Tok::Eof {
        let (rule, line) = parser.rule()?;
        if let Some(prev) = rules.iter().find(|r| r.code == rule.code) {
            return Err(syntax(line, 1, format!("duplicate code {} (already used by `{}`)", rule.code, prev.name)));
        }
        if rules.iter().any(|r| r.name == rule.name) {
            return Err(syntax(line, 1, format!("duplicate rule name `{}`", rule.name)));
        }
        rules.push(rule);
    }
    RiskRuleSet::new(rules)
}

pub fn load(path: impl AsRef<std::path::Path>) -> Result<RiskRuleSet> {
    parse(&std::fs::read_to_string(path)?)
}

/// Standalone evaluation against a raw record (feature lookup by name).
pub fn evaluate(rule: &RiskRule, record: &Record<'_>) -> Result<bool> {
    rule.evaluate(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Feature, SchemaSidecar, Value};

    fn schema() -> FeatureSchema {
        FeatureSchema::from_sidecar(SchemaSidecar {
            label: "churn".into(),
            ids: vec![],
            numeric: vec!["payment_delay".into(), "tenure".into()],
            categorical: vec!["contract".into()],
        })
        .unwrap()
    }

    fn record_values(delay: f64, tenure: f64, contract: &str) -> Vec<Value> {
        vec![Value::Num(delay), Value::Num(tenure), Value::Cat(contract.into())]
    }

    #[test]
    fn single_condition_rule() {
        let set = parse(r#"rule "late_payer" code 4 quadrant financial: payment_delay > 20"#).unwrap();
        assert_eq!(set.len(), 1);
        let r = &set.rules()[0];
        assert_eq!(r.code, 4);
        assert_eq!(r.quadrant, Quadrant::Financial);
        assert_eq!(r.predicate, vec![AtomicPredicate::numeric("payment_delay", Comparator::Gt, 20.0)]);
    }

    #[test]
    fn conjunction_rule() {
        let set = parse(
            "# structural\nrule \"locked_out\" code 7 quadrant structural: contract == \"monthly\" AND tenure <= 6\n",
        )
        .unwrap();
        assert_eq!(set.rules()[0].predicate.len(), 2);
    }

    #[test]
    fn duplicate_code_reports_second_line() {
        let src = "rule \"a\" code 5 quadrant financial: payment_delay > 1\n\
                   \n\
                   rule \"b\" code 5 quadrant engagement: tenure > 2\n";
        match parse(src) {
            Err(Error::RuleSyntax { line, message, .. }) => {
                assert_eq!(line, 3);
                assert!(message.contains("duplicate code"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn code_range_and_quadrant_checked() {
        assert!(matches!(
            parse("rule \"a\" code 12 quadrant financial: x > 1"),
            Err(Error::RuleSyntax { column: 15, .. })
        ));
        assert!(matches!(
            parse("rule \"a\" code 4 quadrant social: x > 1"),
            Err(Error::RuleSyntax { line: 1, column: 26, .. })
        ));
    }

    #[test]
    fn syntax_errors_carry_position() {
        match parse("rule \"a\" code 4 quadrant financial:\n  x >") {
            Err(Error::RuleSyntax { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse("rule \"a\" code 4 quadrant financial: x == 3").is_err());
        assert!(parse("rule \"a\" code 4 quadrant financial: x > \"3\"").is_err());
        assert!(parse(
            "rule \"a\" code 4 quadrant financial: a > 1 AND b > 1 AND c > 1 AND d > 1 AND e > 1"
        )
        .is_err());
    }

    #[test]
    fn comments_only_is_empty() {
        assert!(parse("# nothing here\n\n").unwrap().is_empty());
    }

    #[test]
    fn strict_comparators_normalized() {
        let set = parse("rule \"a\" code 4 quadrant financial: tenure < 6 AND payment_delay >= 20").unwrap();
        let s = schema();
        let r = &set.rules()[0];
        let eval = |d: f64, t: f64| {
            let v = record_values(d, t, "monthly");
            r.evaluate(&Record { schema: &s, values: &v }).unwrap()
        };
        assert!(eval(20.0, 5.999));
        assert!(!eval(20.0, 6.0));
        assert!(!eval(19.999, 1.0));
        for cond in &r.predicate {
            assert!(cond.comparator.is_numeric());
        }
    }

    #[test]
    fn evaluate_examples() {
        let s = schema();
        let set = parse(
            "rule \"late\" code 4 quadrant financial: payment_delay > 20\n\
             rule \"locked\" code 7 quadrant structural: contract == \"monthly\" AND tenure <= 6\n",
        )
        .unwrap();
        let late = &set.rules()[0];
        let locked = &set.rules()[1];
        let v = record_values(25.0, 6.0, "annual");
        let rec = Record { schema: &s, values: &v };
        assert!(late.evaluate(&rec).unwrap());
        assert!(!locked.evaluate(&rec).unwrap());
        let v = record_values(0.0, 6.0, "monthly");
        assert!(locked.evaluate(&Record { schema: &s, values: &v }).unwrap());
    }

    #[test]
    fn missing_feature_errors() {
        let s = FeatureSchema::new(
            vec![Feature {
                name: "tenure".into(),
                kind: FeatureKind::Numeric,
            }],
            "churn",
            vec![],
        )
        .unwrap();
        let set = parse("rule \"late\" code 4 quadrant financial: payment_delay > 20").unwrap();
        let v = vec![Value::Num(1.0)];
        assert!(set.rules()[0].evaluate(&Record { schema: &s, values: &v }).is_err());
        assert!(matches!(set.bind(&s), Err(Error::RuleBinding(_))));
    }

    #[test]
    fn bind_checks_kinds() {
        let set = parse("rule \"a\" code 4 quadrant financial: tenure == \"long\"").unwrap();
        assert!(set.bind(&schema()).is_err());
        let set = parse("rule \"a\" code 4 quadrant financial: tenure > 3").unwrap();
        assert!(set.bind(&schema()).is_ok());
    }

    #[test]
    fn precedence_is_ascending_code() {
        let set = parse(
            "rule \"b\" code 9 quadrant financial: tenure > 1\n\
             rule \"a\" code 5 quadrant financial: tenure > 1\n",
        )
        .unwrap();
        let order: Vec<u8> = set.by_precedence().iter().map(|r| r.code).collect();
        assert_eq!(order, vec![5, 9]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cond() -> impl Strategy<Value = AtomicPredicate> {
            prop_oneof![
                ("[a-z][a-z_]{0,6}", any::<bool>(), -1e6f64..1e6).prop_map(|(f, le, t)| {
                    AtomicPredicate::numeric(f, if le { Comparator::Le } else { Comparator::Gt }, t)
                }),
                ("[a-z][a-z_]{0,6}", any::<bool>(), "[ -~]{1,8}").prop_map(|(f, eq, c)| {
                    AtomicPredicate::categorical(f, if eq { Comparator::Eq } else { Comparator::Ne }, c)
                }),
            ]
            .prop_filter("keyword", |c| c.feature != "rule" && c.feature != "AND")
        }

        fn ruleset() -> impl Strategy<Value = RiskRuleSet> {
            proptest::collection::vec(
                (
                    proptest::collection::vec(cond(), 1..=4),
                    prop_oneof![
                        Just(Quadrant::Financial),
                        Just(Quadrant::Structural),
                        Just(Quadrant::Interaction),
                        Just(Quadrant::Engagement)
                    ],
                ),
                0..8,
            )
            .prop_map(|rules| {
                RiskRuleSet::new(
                    rules
                        .into_iter()
                        .enumerate()
                        .map(|(i, (predicate, quadrant))| RiskRule {
                            name: format!("rule {i} \"q\""),
                            code: 4 + i as u8,
                            quadrant,
                            predicate,
                        })
                        .collect(),
                )
                .unwrap()
            })
        }

        proptest! {
            #[test]
            fn print_parse_round_trip(set in ruleset()) {
                let printed = set.to_string();
                prop_assert_eq!(parse(&printed).unwrap(), set);
            }

            // a conjunction is false iff some condition is false
            #[test]
            fn de_morgan(delay in 0f64..40.0, tenure in 0f64..12.0, monthly in any::<bool>()) {
                let s = schema();
                let set = parse(
                    "rule \"a\" code 4 quadrant financial: payment_delay > 20 AND tenure <= 6 AND contract == \"monthly\"",
                ).unwrap();
                let rule = &set.rules()[0];
                let v = record_values(delay, tenure, if monthly { "monthly" } else { "annual" });
                let rec = Record { schema: &s, values: &v };
                let any_false = rule.predicate.iter().any(|c| !c.evaluate(&rec).unwrap());
                prop_assert_eq!(rule.evaluate(&rec).unwrap(), !any_false);
                prop_assert_eq!(rule.evaluate(&rec).unwrap(), rule.evaluate(&rec).unwrap());
            }
        }
    }
}
