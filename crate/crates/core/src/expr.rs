//! Arithmetic expressions over the state variables `x1..xd` and the
//! environment index `i`.
//!
//! Grammar (precedence `^` > unary `-` > `*`,`/` > `+`,`-`, all binary
//! operators left-associative):
//!
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := '-' factor | power
//! power  := atom ('^' '-'? number)?
//! atom   := number | ident | func '(' expr (',' expr)* ')' | '(' expr ')'
//! ```
//!
//! Exponents are numeric literals only, so every expression has closed-form
//! first and second derivatives.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error at position {position}: expected one of {expected:?}")]
    Syntax {
        /// 1-based character position; `len + 1` means end of input.
        position: usize,
        expected: Vec<String>,
    },
    #[error("unknown variable `{name}` at position {position}")]
    UnknownVariable { name: String, position: usize },
    #[error("unknown function `{name}` at position {position}")]
    UnknownFunction { name: String, position: usize },
    #[error("function `{func}` takes {expected} argument(s), found {found}")]
    ArityMismatch {
        func: String,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Min,
    Max,
}

impl Func {
    pub const ALL: [Func; 9] = [
        Func::Sin,
        Func::Cos,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Abs,
        Func::Tanh,
        Func::Min,
        Func::Max,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
            Func::Tanh => "tanh",
            Func::Min => "min",
            Func::Max => "max",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn from_name(name: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == name)
    }

    fn apply(self, args: &[f64]) -> f64 {
        let u = args[0];
        match self {
            Func::Sin => u.sin(),
            Func::Cos => u.cos(),
            Func::Exp => u.exp(),
            Func::Log => u.ln(),
            Func::Sqrt => u.sqrt(),
            Func::Abs => u.abs(),
            Func::Tanh => u.tanh(),
            Func::Min => u.min(args[1]),
            Func::Max => u.max(args[1]),
        }
    }
}

/// Expression tree. `Var(k)` is the 0-based coordinate `x{k+1}`; `Env` is
/// the environment index `i` evaluated as a real number.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Env,
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, f64),
    Call(Func, Vec<Expr>),
}

impl Expr {
    pub fn constant(c: f64) -> Expr {
        Expr::Const(c)
    }

    pub fn var(index: usize) -> Expr {
        Expr::Var(index)
    }

    pub fn eval(&self, x: &[f64], env: f64) -> f64 {
        match self {
            Expr::Const(c) => *c,
            Expr::Var(k) => x[*k],
            Expr::Env => env,
            Expr::Neg(u) => -u.eval(x, env),
            Expr::Add(u, v) => u.eval(x, env) + v.eval(x, env),
            Expr::Sub(u, v) => u.eval(x, env) - v.eval(x, env),
            Expr::Mul(u, v) => u.eval(x, env) * v.eval(x, env),
            Expr::Div(u, v) => u.eval(x, env) / v.eval(x, env),
            Expr::Pow(u, p) => pow(u.eval(x, env), *p),
            Expr::Call(f, args) => match args.as_slice() {
                [u] => f.apply(&[u.eval(x, env)]),
                [u, v] => f.apply(&[u.eval(x, env), v.eval(x, env)]),
                _ => f64::NAN,
            },
        }
    }

    /// Largest variable index referenced, plus one (0 for closed expressions).
    pub fn var_bound(&self) -> usize {
        match self {
            Expr::Const(_) | Expr::Env => 0,
            Expr::Var(k) => k + 1,
            Expr::Neg(u) | Expr::Pow(u, _) => u.var_bound(),
            Expr::Add(u, v) | Expr::Sub(u, v) | Expr::Mul(u, v) | Expr::Div(u, v) => {
                u.var_bound().max(v.var_bound())
            }
            Expr::Call(_, args) => args.iter().map(Expr::var_bound).max().unwrap_or(0),
        }
    }

    pub fn uses_env(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) => false,
            Expr::Env => true,
            Expr::Neg(u) | Expr::Pow(u, _) => u.uses_env(),
            Expr::Add(u, v) | Expr::Sub(u, v) | Expr::Mul(u, v) | Expr::Div(u, v) => {
                u.uses_env() || v.uses_env()
            }
            Expr::Call(_, args) => args.iter().any(Expr::uses_env),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    pub fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }

    /// Conservative syntactic check: no non-constant denominators, no `log`,
    /// no negative powers. Expressions passing it are continuous wherever
    /// they are finite.
    pub fn is_continuous(&self) -> bool {
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Env => true,
            Expr::Neg(u) => u.is_continuous(),
            Expr::Pow(u, p) => *p >= 0.0 && u.is_continuous(),
            Expr::Add(u, v) | Expr::Sub(u, v) | Expr::Mul(u, v) => u.is_continuous() && v.is_continuous(),
            Expr::Div(u, v) => v.as_const().is_some() && u.is_continuous(),
            Expr::Call(Func::Log, _) => false,
            Expr::Call(_, args) => args.iter().all(Expr::is_continuous),
        }
    }

    /// Symbolic partial derivative with respect to `x{var+1}`, constant-folded.
    pub fn differentiate(&self, var: usize) -> Expr {
        diff(self, var).simplify()
    }

    /// Constant folding plus the identities `0*u = 0`, `1*u = u`, `u+0 = u`,
    /// `u-0 = u`, `u/1 = u`, `u^1 = u`, `u^0 = 1`, `--u = u`.
    pub fn simplify(&self) -> Expr {
        match self {
            Expr::Const(_) | Expr::Var(_) | Expr::Env => self.clone(),
            Expr::Neg(u) => neg(u.simplify()),
            Expr::Add(u, v) => add(u.simplify(), v.simplify()),
            Expr::Sub(u, v) => sub(u.simplify(), v.simplify()),
            Expr::Mul(u, v) => mul(u.simplify(), v.simplify()),
            Expr::Div(u, v) => div(u.simplify(), v.simplify()),
            Expr::Pow(u, p) => powe(u.simplify(), *p),
            Expr::Call(f, args) => call(*f, args.iter().map(Expr::simplify).collect()),
        }
    }
}

fn pow(base: f64, p: f64) -> f64 {
    if p.fract() == 0.0 && p.abs() <= i32::MAX as f64 {
        base.powi(p as i32)
    } else {
        base.powf(p)
    }
}

fn neg(u: Expr) -> Expr {
    match u {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Neg(inner) => *inner,
        u => Expr::Neg(Box::new(u)),
    }
}

fn add(u: Expr, v: Expr) -> Expr {
    match (u, v) {
        (Expr::Const(a), Expr::Const(b)) => Expr::Const(a + b),
        (u, v) if v.is_zero() => u,
        (u, v) if u.is_zero() => v,
        (u, v) => Expr::Add(Box::new(u), Box::new(v)),
    }
}

fn sub(u: Expr, v: Expr) -> Expr {
    match (u, v) {
        (Expr::Const(a), Expr::Const(b)) => Expr::Const(a - b),
        (u, v) if v.is_zero() => u,
        (u, v) if u.is_zero() => neg(v),
        (u, v) => Expr::Sub(Box::new(u), Box::new(v)),
    }
}

fn mul(u: Expr, v: Expr) -> Expr {
    match (u, v) {
        (Expr::Const(a), Expr::Const(b)) => Expr::Const(a * b),
        (u, v) if u.is_zero() || v.is_zero() => Expr::Const(0.0),
        (Expr::Const(1.0), v) => v,
        (u, Expr::Const(1.0)) => u,
        (Expr::Const(-1.0), v) => neg(v),
        (u, Expr::Const(-1.0)) => neg(u),
        (u, v) => Expr::Mul(Box::new(u), Box::new(v)),
    }
}

fn div(u: Expr, v: Expr) -> Expr {
    match (u, v) {
        (Expr::Const(a), Expr::Const(b)) if b != 0.0 => Expr::Const(a / b),
        (u, _) if u.is_zero() => Expr::Const(0.0),
        (u, Expr::Const(1.0)) => u,
        (u, v) => Expr::Div(Box::new(u), Box::new(v)),
    }
}

fn powe(u: Expr, p: f64) -> Expr {
    if p == 0.0 {
        return Expr::Const(1.0);
    }
    if p == 1.0 {
        return u;
    }
    match u {
        Expr::Const(c) => Expr::Const(pow(c, p)),
        u => Expr::Pow(Box::new(u), p),
    }
}

fn call(f: Func, args: Vec<Expr>) -> Expr {
    if args.iter().all(|a| a.as_const().is_some()) {
        let vals: Vec<f64> = args.iter().filter_map(Expr::as_const).collect();
        let v = f.apply(&vals);
        if v.is_finite() {
            return Expr::Const(v);
        }
    }
    Expr::Call(f, args)
}

fn diff(e: &Expr, var: usize) -> Expr {
    match e {
        Expr::Const(_) | Expr::Env => Expr::Const(0.0),
        Expr::Var(k) => Expr::Const(if *k == var { 1.0 } else { 0.0 }),
        Expr::Neg(u) => neg(diff(u, var)),
        Expr::Add(u, v) => add(diff(u, var), diff(v, var)),
        Expr::Sub(u, v) => sub(diff(u, var), diff(v, var)),
        Expr::Mul(u, v) => add(
            mul(diff(u, var), (**v).clone()),
            mul((**u).clone(), diff(v, var)),
        ),
        Expr::Div(u, v) => {
            let (du, dv) = (diff(u, var), diff(v, var));
            if dv.is_zero() {
                return div(du, (**v).clone());
            }
            div(
                sub(mul(du, (**v).clone()), mul((**u).clone(), dv)),
                powe((**v).clone(), 2.0),
            )
        }
        Expr::Pow(u, p) => mul(
            mul(Expr::Const(*p), powe((**u).clone(), p - 1.0)),
            diff(u, var),
        ),
        Expr::Call(f, args) => {
            let u = args[0].clone();
            let du = diff(&args[0], var);
            match f {
                Func::Sin => mul(call(Func::Cos, vec![u]), du),
                Func::Cos => neg(mul(call(Func::Sin, vec![u]), du)),
                Func::Exp => mul(call(Func::Exp, vec![u]), du),
                Func::Log => div(du, u),
                Func::Sqrt => div(du, mul(Expr::Const(2.0), call(Func::Sqrt, vec![u]))),
                Func::Abs => mul(du, div(u.clone(), call(Func::Abs, vec![u]))),
                Func::Tanh => mul(
                    sub(
                        Expr::Const(1.0),
                        powe(call(Func::Tanh, vec![u]), 2.0),
                    ),
                    du,
                ),
                Func::Min | Func::Max => {
                    // min(u,v) = (u + v - |u - v|)/2, max(u,v) = (u + v + |u - v|)/2
                    let v = args[1].clone();
                    let dv = diff(&args[1], var);
                    let w = sub(u.clone(), v.clone());
                    let dabs = mul(
                        sub(du.clone(), dv.clone()),
                        div(w.clone(), call(Func::Abs, vec![w])),
                    );
                    let sum = add(du, dv);
                    let inner = if *f == Func::Min {
                        sub(sum, dabs)
                    } else {
                        add(sum, dabs)
                    };
                    mul(Expr::Const(0.5), inner)
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Printing

const PREC_SUM: u8 = 1;
const PREC_PRODUCT: u8 = 2;
const PREC_UNARY: u8 = 3;
const PREC_POWER: u8 = 4;
const PREC_ATOM: u8 = 5;

fn precedence(e: &Expr) -> u8 {
    match e {
        Expr::Add(..) | Expr::Sub(..) => PREC_SUM,
        Expr::Mul(..) | Expr::Div(..) => PREC_PRODUCT,
        Expr::Neg(_) => PREC_UNARY,
        Expr::Pow(..) => PREC_POWER,
        Expr::Const(c) if c.is_sign_negative() => PREC_UNARY,
        _ => PREC_ATOM,
    }
}

fn fmt_number(c: f64) -> String {
    if c.is_finite() && c.fract() == 0.0 && c.abs() < 1e15 {
        format!("{}", c as i64)
    } else {
        format!("{c:?}")
    }
}

fn write_child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if precedence(e) < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) if c.is_sign_negative() => write!(f, "-{}", fmt_number(-c)),
            Expr::Const(c) => f.write_str(&fmt_number(*c)),
            Expr::Var(k) => write!(f, "x{}", k + 1),
            Expr::Env => f.write_str("i"),
            Expr::Neg(u) => {
                f.write_str("-")?;
                write_child(f, u, PREC_UNARY)
            }
            Expr::Add(u, v) | Expr::Sub(u, v) => {
                let op = if matches!(self, Expr::Add(..)) { " + " } else { " - " };
                write_child(f, u, PREC_SUM)?;
                f.write_str(op)?;
                write_child(f, v, PREC_PRODUCT)
            }
            Expr::Mul(u, v) | Expr::Div(u, v) => {
                let op = if matches!(self, Expr::Mul(..)) { "*" } else { "/" };
                write_child(f, u, PREC_PRODUCT)?;
                f.write_str(op)?;
                write_child(f, v, PREC_UNARY)
            }
            Expr::Pow(u, p) => {
                write_child(f, u, PREC_ATOM)?;
                if p.is_sign_negative() {
                    write!(f, "^-{}", fmt_number(-p))
                } else {
                    write!(f, "^{}", fmt_number(*p))
                }
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Lexing and parsing

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
    Comma,
    End,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Num(_) => "number".into(),
            Tok::Ident(_) => "identifier".into(),
            Tok::Plus => "'+'".into(),
            Tok::Minus => "'-'".into(),
            Tok::Star => "'*'".into(),
            Tok::Slash => "'/'".into(),
            Tok::Caret => "'^'".into(),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Comma => "','".into(),
            Tok::End => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, ParseError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < chars.len() {
        let c = chars[k];
        let pos = k + 1;
        if c.is_whitespace() {
            k += 1;
            continue;
        }
        let single = match c {
            '+' => Some(Tok::Plus),
            '-' => Some(Tok::Minus),
            '*' => Some(Tok::Star),
            '/' => Some(Tok::Slash),
            '^' => Some(Tok::Caret),
            '(' => Some(Tok::LParen),
            ')' => Some(Tok::RParen),
            ',' => Some(Tok::Comma),
            _ => None,
        };
        if let Some(t) = single {
            out.push((t, pos));
            k += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = k;
            while k < chars.len() && (chars[k].is_ascii_digit() || chars[k] == '.') {
                k += 1;
            }
            if k < chars.len() && (chars[k] == 'e' || chars[k] == 'E') {
                let mut j = k + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    k = j;
                    while k < chars.len() && chars[k].is_ascii_digit() {
                        k += 1;
                    }
                }
            }
            let lit: String = chars[start..k].iter().collect();
            let value = lit.parse::<f64>().map_err(|_| ParseError::Syntax {
                position: pos,
                expected: vec!["number".into()],
            })?;
            out.push((Tok::Num(value), pos));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = k;
            while k < chars.len() && (chars[k].is_ascii_alphanumeric() || chars[k] == '_') {
                k += 1;
            }
            out.push((Tok::Ident(chars[start..k].iter().collect()), pos));
        } else {
            return Err(ParseError::Syntax {
                position: pos,
                expected: vec!["number".into(), "identifier".into(), "'('".into(), "'-'".into()],
            });
        }
    }
    out.push((Tok::End, chars.len() + 1));
    Ok(out)
}

struct Parser {
    toks: Vec<(Tok, usize)>,
    at: usize,
    dim: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.at].0
    }

    fn pos(&self) -> usize {
        self.toks[self.at].1
    }

    fn bump(&mut self) -> Tok {
        let t = self.toks[self.at].0.clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError::Syntax {
            position: self.pos(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Tok::Plus => {
                    self.bump();
                    lhs = Expr::Add(Box::new(lhs), Box::new(self.term()?));
                }
                Tok::Minus => {
                    self.bump();
                    lhs = Expr::Sub(Box::new(lhs), Box::new(self.term()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Tok::Star => {
                    self.bump();
                    lhs = Expr::Mul(Box::new(lhs), Box::new(self.factor()?));
                }
                Tok::Slash => {
                    self.bump();
                    lhs = Expr::Div(Box::new(lhs), Box::new(self.factor()?));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        if *self.peek() == Tok::Minus {
            self.bump();
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if *self.peek() != Tok::Caret {
            return Ok(base);
        }
        self.bump();
        let negative = if *self.peek() == Tok::Minus {
            self.bump();
            true
        } else {
            false
        };
        match self.peek().clone() {
            Tok::Num(p) => {
                self.bump();
                Ok(Expr::Pow(Box::new(base), if negative { -p } else { p }))
            }
            _ => self.fail(&["number"]),
        }
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        let pos = self.pos();
        match self.peek().clone() {
            Tok::Num(c) => {
                self.bump();
                Ok(Expr::Const(c))
            }
            Tok::LParen => {
                self.bump();
                let inner = self.expr()?;
                if *self.peek() != Tok::RParen {
                    return self.fail(&["')'", "operator"]);
                }
                self.bump();
                Ok(inner)
            }
            Tok::Ident(name) => {
                self.bump();
                if *self.peek() == Tok::LParen {
                    let func = Func::from_name(&name).ok_or(ParseError::UnknownFunction {
                        name: name.clone(),
                        position: pos,
                    })?;
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while *self.peek() == Tok::Comma {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    if *self.peek() != Tok::RParen {
                        return self.fail(&["')'", "','", "operator"]);
                    }
                    self.bump();
                    if args.len() != func.arity() {
                        return Err(ParseError::ArityMismatch {
                            func: name,
                            expected: func.arity(),
                            found: args.len(),
                        });
                    }
                    return Ok(Expr::Call(func, args));
                }
                self.variable(&name, pos)
            }
            _ => self.fail(&["number", "identifier", "'('", "'-'"]),
        }
    }

    fn variable(&self, name: &str, pos: usize) -> Result<Expr, ParseError> {
        if name == "i" {
            return Ok(Expr::Env);
        }
        let index = name
            .strip_prefix('x')
            .filter(|digits| !digits.is_empty() && !digits.starts_with('0'))
            .and_then(|digits| digits.parse::<usize>().ok())
            .filter(|k| (1..=self.dim).contains(k));
        match index {
            Some(k) => Ok(Expr::Var(k - 1)),
            None => Err(ParseError::UnknownVariable {
                name: name.to_string(),
                position: pos,
            }),
        }
    }
}

/// Parses `text` as an expression over `x1..x{dim}` and `i`.
pub fn parse_expression(text: &str, dim: usize) -> Result<Expr, ParseError> {
    let toks = lex(text)?;
    let mut p = Parser { toks, at: 0, dim };
    if *p.peek() == Tok::End {
        return p.fail(&["expression"]);
    }
    let e = p.expr()?;
    if *p.peek() != Tok::End {
        let found = p.peek().describe();
        return Err(ParseError::Syntax {
            position: p.pos(),
            expected: vec![format!("operator or end of input (found {found})")],
        });
    }
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        parse_expression(s, 3).unwrap()
    }

    #[test]
    fn quartic_evaluates() {
        assert_eq!(p("1 + x1^4").eval(&[2.0], 1.0), 17.0);
    }

    #[test]
    fn dangling_operator_reports_end_position() {
        match parse_expression("x1 +", 1) {
            Err(ParseError::Syntax { position, .. }) => assert_eq!(position, 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn odd_function_vanishes_at_origin() {
        let v = p("-x1*exp(-x1^2/2)").eval(&[0.0], 1.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(p("2 - 3 - 4").eval(&[], 0.0), -5.0);
        assert_eq!(p("2 / 4 / 2").eval(&[], 0.0), 0.25);
        assert_eq!(p("-2^2").eval(&[], 0.0), -4.0);
        assert_eq!(p("2*3^2").eval(&[], 0.0), 18.0);
        assert_eq!(p("(1+x1^2)^-1").eval(&[1.0], 0.0), 0.5);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            parse_expression("x4", 3),
            Err(ParseError::UnknownVariable { .. })
        ));
        assert!(matches!(
            parse_expression("y + 1", 1),
            Err(ParseError::UnknownVariable { .. })
        ));
        assert!(matches!(
            parse_expression("min(x1)", 1),
            Err(ParseError::ArityMismatch { expected: 2, found: 1, .. })
        ));
        assert!(matches!(
            parse_expression("x1^x1", 1),
            Err(ParseError::Syntax { position: 4, .. })
        ));
        assert!(matches!(
            parse_expression("foo(x1)", 1),
            Err(ParseError::UnknownFunction { .. })
        ));
        assert!(parse_expression("", 1).is_err());
        assert!(parse_expression("(x1", 1).is_err());
        assert!(parse_expression("x1 x1", 1).is_err());
    }

    #[test]
    fn derivative_rules() {
        assert_eq!(p("x1^2").differentiate(0), p("2*x1"));
        assert_eq!(p("sin(x1)").differentiate(0), p("cos(x1)"));
        assert_eq!(p("x2 + 3").differentiate(0), Expr::Const(0.0));
        assert_eq!(p("i*x1").differentiate(0), Expr::Env);
    }

    #[test]
    fn quartic_derivative_matches_finite_difference() {
        let e = p("1+x1^4");
        let de = e.differentiate(0);
        let h = 1e-5;
        let fd = (e.eval(&[1.0 + h], 0.0) - e.eval(&[1.0 - h], 0.0)) / (2.0 * h);
        assert_eq!(de.eval(&[1.0], 0.0), 4.0);
        assert!((fd - 4.0).abs() < 1e-8, "fd = {fd}");
    }

    #[test]
    fn zero_drift_folds() {
        assert!(p("0*x1 + 0").simplify().is_zero());
        assert!(p("x1 - x1").simplify() != Expr::Const(0.0));
    }

    #[test]
    fn printing_reparses() {
        for s in [
            "-x1*exp(-x1^2/2)",
            "(1 + x1^2)^-1",
            "x1 - (x2 - x3)",
            "x1/(x2*x3)",
            "-(x1 + 1)",
            "--x1",
            "max(x1, 2.5e-3)",
            "(-x1)^2",
        ] {
            let e = p(s);
            assert_eq!(p(&e.to_string()), e, "{s} printed as {e}");
        }
    }
}
