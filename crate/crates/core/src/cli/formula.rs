//! Model formulas, one declaration per predictor:
//!
//! ```text
//! lambda ~ s(time, k=10)
//! gamma  ~ 1 + s(x1, k=10)
//! alpha  ~ 1
//! mu     ~ 1 + lin(age) + s(time, k=12) + ri(id) + fri(id, time, k=12)
//! sigma  ~ 1
//! ```
//!
//! Spline terms take `k` (knots, default 10), `degree` (3) and `order`
//! (difference order, 2). `#` starts a comment. The result does not depend
//! on the order of the declarations.

use crate::model::{ModelSpec, Predictor, SplineSettings, TermKind, TermSpec};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormulaError {
    #[error("{line}:{col}: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("{line}:{col}: predictor `{name}` declared twice")]
    Duplicate { line: usize, col: usize, name: String },
    #[error("{line}:{col}: unknown predictor `{name}` (expected lambda, gamma, alpha, mu or sigma)")]
    UnknownPredictor { line: usize, col: usize, name: String },
    #[error("{line}:{col}: unknown function `{name}` (expected lin, s, ri or fri)")]
    UnknownFunction { line: usize, col: usize, name: String },
    #[error("{line}:{col}: {message}")]
    InvalidTerm { line: usize, col: usize, message: String },
    #[error("empty formula")]
    Empty,
}

pub const DEFAULT_KNOTS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(String),
    Tilde,
    Plus,
    LParen,
    RParen,
    Comma,
    Equals,
    Newline,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("`{s}`"),
            Tok::Number(s) => format!("`{s}`"),
            Tok::Tilde => "`~`".into(),
            Tok::Plus => "`+`".into(),
            Tok::LParen => "`(`".into(),
            Tok::RParen => "`)`".into(),
            Tok::Comma => "`,`".into(),
            Tok::Equals => "`=`".into(),
            Tok::Newline => "end of line".into(),
            Tok::End => "end of input".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, FormulaError> {
    let mut out = Vec::new();
    let mut last_line = 1;
    for (li, raw) in text.lines().enumerate() {
        let line = li + 1;
        last_line = line;
        let chars: Vec<char> = raw.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let col = i + 1;
            let single = match c {
                '~' => Some(Tok::Tilde),
                '+' => Some(Tok::Plus),
                '(' => Some(Tok::LParen),
                ')' => Some(Tok::RParen),
                ',' => Some(Tok::Comma),
                '=' => Some(Tok::Equals),
                _ => None,
            };
            if let Some(tok) = single {
                out.push(Token { tok, line, col });
                i += 1;
            } else if c == '#' {
                break;
            } else if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Ident(chars[start..i].iter().collect()),
                    line,
                    col,
                });
            } else if c.is_ascii_digit() {
                let start = i;
                while i < chars.len() && chars[i].is_ascii_digit() {
                    i += 1;
                }
                out.push(Token {
                    tok: Tok::Number(chars[start..i].iter().collect()),
                    line,
                    col,
                });
            } else {
                return Err(FormulaError::Syntax {
                    line,
                    col,
                    message: format!("unexpected character `{c}`"),
                });
            }
        }
        out.push(Token {
            tok: Tok::Newline,
            line,
            col: chars.len() + 1,
        });
    }
    out.push(Token {
        tok: Tok::End,
        line: last_line,
        col: 1,
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

/// A function argument: either a bare name or `name=integer`.
struct Arg {
    name: String,
    value: Option<usize>,
    line: usize,
    col: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn syntax(t: &Token, expected: &str) -> FormulaError {
        FormulaError::Syntax {
            line: t.line,
            col: t.col,
            message: format!("expected {expected}, found {}", t.tok.describe()),
        }
    }

    fn expect(&mut self, tok: Tok, expected: &str) -> Result<Token, FormulaError> {
        let t = self.next();
        if t.tok == tok {
            Ok(t)
        } else {
            Err(Self::syntax(&t, expected))
        }
    }

    fn skip_newlines(&mut self) {
        while self.peek().tok == Tok::Newline {
            self.next();
        }
    }

    fn declaration(&mut self) -> Result<(Predictor, Token, Vec<TermSpec>), FormulaError> {
        let head = self.next();
        let name = match &head.tok {
            Tok::Ident(s) => s.clone(),
            _ => return Err(Self::syntax(&head, "a predictor name")),
        };
        let predictor = Predictor::from_name(&name).ok_or_else(|| FormulaError::UnknownPredictor {
            line: head.line,
            col: head.col,
            name: name.clone(),
        })?;
        self.expect(Tok::Tilde, "`~`")?;
        let mut terms = vec![self.term(predictor)?];
        loop {
            let t = self.next();
            match t.tok {
                Tok::Plus => terms.push(self.term(predictor)?),
                Tok::Newline | Tok::End => break,
                _ => return Err(Self::syntax(&t, "`+` or end of line")),
            }
        }
        Ok((predictor, head, terms))
    }

    fn term(&mut self, predictor: Predictor) -> Result<TermSpec, FormulaError> {
        let t = self.next();
        let name = match &t.tok {
            Tok::Number(n) if n == "1" => return Ok(TermSpec::new(predictor, TermKind::Intercept)),
            Tok::Ident(s) => s.clone(),
            _ => return Err(Self::syntax(&t, "`1` or a term such as `s(time, k=10)`")),
        };
        if !matches!(name.as_str(), "lin" | "s" | "ri" | "fri") {
            return Err(FormulaError::UnknownFunction {
                line: t.line,
                col: t.col,
                name,
            });
        }
        self.expect(Tok::LParen, "`(`")?;
        let mut args = vec![self.arg()?];
        loop {
            let n = self.next();
            match n.tok {
                Tok::Comma => args.push(self.arg()?),
                Tok::RParen => break,
                _ => return Err(Self::syntax(&n, "`,` or `)`")),
            }
        }
        let spec = build_term(predictor, &name, &args, &t)?;
        spec.validate().map_err(|e| FormulaError::InvalidTerm {
            line: t.line,
            col: t.col,
            message: e.to_string(),
        })?;
        Ok(spec)
    }

    fn arg(&mut self) -> Result<Arg, FormulaError> {
        let t = self.next();
        let name = match &t.tok {
            Tok::Ident(s) => s.clone(),
            _ => return Err(Self::syntax(&t, "an argument name")),
        };
        if self.peek().tok != Tok::Equals {
            return Ok(Arg {
                name,
                value: None,
                line: t.line,
                col: t.col,
            });
        }
        self.next();
        let v = self.next();
        match &v.tok {
            Tok::Number(n) => Ok(Arg {
                name,
                value: Some(n.parse().map_err(|_| FormulaError::Syntax {
                    line: v.line,
                    col: v.col,
                    message: format!("integer `{n}` out of range"),
                })?),
                line: t.line,
                col: t.col,
            }),
            _ => Err(Self::syntax(&v, "an integer")),
        }
    }
}

fn invalid(a: &Arg, message: String) -> FormulaError {
    FormulaError::InvalidTerm {
        line: a.line,
        col: a.col,
        message,
    }
}

fn build_term(predictor: Predictor, func: &str, args: &[Arg], at: &Token) -> Result<TermSpec, FormulaError> {
    let positional: Vec<&Arg> = args.iter().filter(|a| a.value.is_none()).collect();
    let named: Vec<&Arg> = args.iter().filter(|a| a.value.is_some()).collect();
    let spline_term = matches!(func, "s" | "fri");
    let mut spline = SplineSettings::cubic(DEFAULT_KNOTS);
    for a in &named {
        if !spline_term {
            return Err(invalid(a, format!("`{func}` takes no options")));
        }
        let v = a.value.expect("named argument");
        match a.name.as_str() {
            "k" => spline.n_knots = v,
            "degree" => spline.degree = v,
            "order" => spline.diff_order = v,
            other => return Err(invalid(a, format!("unknown option `{other}` (expected k, degree or order)"))),
        }
    }
    let arity = if func == "fri" { 2 } else { 1 };
    if positional.len() != arity {
        return Err(FormulaError::InvalidTerm {
            line: at.line,
            col: at.col,
            message: format!("`{func}` expects {arity} variable argument(s), got {}", positional.len()),
        });
    }
    let var = positional[0].name.clone();
    let kind = match func {
        "lin" => TermKind::Linear { covariate: var },
        "s" if var == "time" => TermKind::SmoothTime { spline },
        "s" => TermKind::Smooth { covariate: var, spline },
        "ri" => TermKind::RandomIntercept { group: var },
        "fri" => {
            if positional[1].name != "time" {
                return Err(invalid(positional[1], "the second argument of `fri` must be `time`".into()));
            }
            TermKind::FunctionalRandomIntercept { group: var, spline }
        }
        _ => unreachable!("function names checked by the parser"),
    };
    Ok(TermSpec::new(predictor, kind))
}

/// Parses a formula into a model specification. Terms are ordered by
/// predictor (λ, γ, α, μ, σ), then as written.
pub fn parse_formula(text: &str) -> Result<ModelSpec, FormulaError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let mut decls: Vec<(Predictor, Vec<TermSpec>)> = Vec::new();
    loop {
        p.skip_newlines();
        if p.peek().tok == Tok::End {
            break;
        }
        let (k, head, terms) = p.declaration()?;
        if decls.iter().any(|(d, _)| *d == k) {
            return Err(FormulaError::Duplicate {
                line: head.line,
                col: head.col,
                name: k.name().to_string(),
            });
        }
        decls.push((k, terms));
    }
    if decls.is_empty() {
        return Err(FormulaError::Empty);
    }
    decls.sort_by_key(|(k, _)| *k);
    Ok(ModelSpec::new(decls.into_iter().flat_map(|(_, t)| t).collect()))
}

fn render_spline(s: &SplineSettings) -> String {
    let mut out = format!(", k={}", s.n_knots);
    if s.degree != 3 {
        let _ = write!(out, ", degree={}", s.degree);
    }
    if s.diff_order != 2 {
        let _ = write!(out, ", order={}", s.diff_order);
    }
    out
}

fn render_term(t: &TermSpec) -> String {
    match &t.kind {
        TermKind::Intercept => "1".into(),
        TermKind::Linear { covariate } => format!("lin({covariate})"),
        TermKind::Smooth { covariate, spline } => format!("s({covariate}{})", render_spline(spline)),
        TermKind::SmoothTime { spline } => format!("s(time{})", render_spline(spline)),
        TermKind::RandomIntercept { group } => format!("ri({group})"),
        TermKind::FunctionalRandomIntercept { group, spline } => {
            format!("fri({group}, time{})", render_spline(spline))
        }
    }
}

/// Formula text for `spec`, one line per declared predictor.
pub fn render_formula(spec: &ModelSpec) -> String {
    let mut out = String::new();
    for k in Predictor::ALL {
        let terms: Vec<String> = spec.terms_of(k).map(render_term).collect();
        if !terms.is_empty() {
            let _ = writeln!(out, "{} ~ {}", k.name(), terms.join(" + "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn intercept_only() {
        let spec = parse_formula("alpha ~ 1").unwrap();
        assert_eq!(spec.terms, vec![TermSpec::new(Predictor::Alpha, TermKind::Intercept)]);
    }

    #[test]
    fn marker_with_random_effects() {
        let spec = parse_formula("mu ~ 1 + s(time, k=12) + ri(id) + fri(id, time, k=12)").unwrap();
        assert_eq!(spec.terms.len(), 4);
        assert_eq!(spec.terms[1].kind, TermKind::SmoothTime { spline: SplineSettings::cubic(12) });
        assert_eq!(
            spec.terms[3].kind,
            TermKind::FunctionalRandomIntercept {
                group: "id".into(),
                spline: SplineSettings::cubic(12)
            }
        );
    }

    #[test]
    fn missing_comma_points_at_token() {
        let err = parse_formula("mu ~ s(time k=12)").unwrap_err();
        assert_eq!(
            err,
            FormulaError::Syntax {
                line: 1,
                col: 13,
                message: "expected `,` or `)`, found `k`".into()
            }
        );
    }

    #[test]
    fn rejections() {
        assert!(matches!(
            parse_formula("mu ~ 1\nmu ~ 1"),
            Err(FormulaError::Duplicate { line: 2, col: 1, .. })
        ));
        assert!(matches!(
            parse_formula("mu ~ 1 + spline(time)"),
            Err(FormulaError::UnknownFunction { line: 1, col: 10, .. })
        ));
        assert!(matches!(parse_formula("beta ~ 1"), Err(FormulaError::UnknownPredictor { .. })));
        assert!(matches!(parse_formula("# nothing\n\n"), Err(FormulaError::Empty)));
        assert!(matches!(parse_formula("gamma ~ s(time)"), Err(FormulaError::InvalidTerm { .. })));
        assert!(matches!(parse_formula("mu ~ s(time, k=5)"), Err(FormulaError::InvalidTerm { .. })));
        assert!(matches!(parse_formula("mu ~ lin(x, k=5)"), Err(FormulaError::InvalidTerm { .. })));
        assert!(matches!(parse_formula("mu ~ fri(id, x1)"), Err(FormulaError::InvalidTerm { .. })));
    }

    #[test]
    fn declaration_order_is_irrelevant() {
        let a = parse_formula("sigma ~ 1\nmu ~ 1 + s(time, k=12)\nlambda ~ s(time)").unwrap();
        let b = parse_formula("lambda ~ s(time)   # baseline\nmu ~ 1 + s(time, k=12)\nsigma ~ 1").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.terms[0].predictor, Predictor::Lambda);
    }

    #[test]
    fn simulation_spec_round_trips() {
        for tv in [false, true] {
            let spec = ModelSpec::simulation_default(tv);
            assert_eq!(parse_formula(&render_formula(&spec)).unwrap(), spec);
        }
    }

    fn covariate() -> impl Strategy<Value = String> {
        prop_oneof![Just("x1".to_string()), Just("age".to_string()), Just("dose_2".to_string())]
    }

    fn spline() -> impl Strategy<Value = SplineSettings> {
        (1usize..=3, 1usize..=2, 0usize..6).prop_map(|(degree, order, extra)| SplineSettings {
            n_knots: 2 * (degree + 1) + order + extra,
            degree,
            diff_order: order,
        })
    }

    fn term(k: Predictor) -> BoxedStrategy<TermKind> {
        let mut options: Vec<BoxedStrategy<TermKind>> = vec![
            Just(TermKind::Intercept).boxed(),
            covariate().prop_map(|c| TermKind::Linear { covariate: c }).boxed(),
            (covariate(), spline())
                .prop_map(|(c, s)| TermKind::Smooth { covariate: c, spline: s })
                .boxed(),
            Just(TermKind::RandomIntercept { group: "id".into() }).boxed(),
        ];
        if k.is_time_varying() {
            options.push(spline().prop_map(|s| TermKind::SmoothTime { spline: s }).boxed());
            options.push(
                spline()
                    .prop_map(|s| TermKind::FunctionalRandomIntercept {
                        group: "id".into(),
                        spline: s,
                    })
                    .boxed(),
            );
        }
        proptest::strategy::Union::new(options).boxed()
    }

    fn model_spec() -> impl Strategy<Value = ModelSpec> {
        let per: Vec<_> = Predictor::ALL
            .iter()
            .map(|&k| proptest::collection::vec(term(k), 0..4).prop_map(move |ts| (k, ts)))
            .collect();
        per.prop_filter_map("at least one term", |decls| {
            let terms: Vec<TermSpec> = decls
                .into_iter()
                .flat_map(|(k, ts)| ts.into_iter().map(move |t| TermSpec::new(k, t)))
                .collect();
            (!terms.is_empty()).then(|| ModelSpec::new(terms))
        })
    }

    proptest! {
        #[test]
        fn render_then_parse_is_identity(spec in model_spec()) {
            let text = render_formula(&spec);
            prop_assert_eq!(parse_formula(&text).unwrap(), spec);
        }
    }
}
