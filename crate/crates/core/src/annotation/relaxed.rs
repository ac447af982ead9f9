//! Lenient JSON reader for hand-written and model-generated annotation text.
//!
//! Accepts, in addition to strict JSON: single-quoted strings, missing commas
//! between members or elements, trailing commas, Python-style `None`/`True`/
//! `False`, and a surrounding markdown code fence.

use serde_json::{Map, Number, Value};
use thiserror::Error;

const MAX_DEPTH: usize = 128;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {message}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

/// Removes a leading ```` ```lang ```` fence and its closing fence, if present.
pub fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return text;
    };
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body)
}

pub fn parse(text: &str) -> Result<Value, SyntaxError> {
    let src = strip_code_fence(text);
    let mut p = Parser {
        chars: src.chars().collect(),
        pos: 0,
    };
    p.skip_ws();
    let v = p.value(0)?;
    p.skip_ws();
    if p.pos < p.chars.len() {
        return Err(p.error("trailing characters after the document"));
    }
    Ok(v)
}

struct Parser {
    chars: Vec<char>,
    pos: usize,
}

impl Parser {
    fn error(&self, message: impl Into<String>) -> SyntaxError {
        let upto = &self.chars[..self.pos.min(self.chars.len())];
        let line = upto.iter().filter(|c| **c == '\n').count() + 1;
        let column = upto.iter().rev().take_while(|c| **c != '\n').count() + 1;
        SyntaxError {
            line,
            column,
            message: message.into(),
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn value(&mut self, depth: usize) -> Result<Value, SyntaxError> {
        if depth > MAX_DEPTH {
            return Err(self.error("nesting too deep"));
        }
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some('{') => self.object(depth),
            Some('[') => self.array(depth),
            Some(q @ ('"' | '\'')) => self.string(q).map(Value::String),
            Some(c) if c == '-' || c == '+' || c == '.' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_alphabetic() => {
                let start = self.pos;
                while self.peek().is_some_and(char::is_alphanumeric) {
                    self.pos += 1;
                }
                let word: String = self.chars[start..self.pos].iter().collect();
                match word.as_str() {
                    "null" | "None" => Ok(Value::Null),
                    "true" | "True" => Ok(Value::Bool(true)),
                    "false" | "False" => Ok(Value::Bool(false)),
                    _ => {
                        self.pos = start;
                        Err(self.error(format!("unexpected word `{word}`")))
                    }
                }
            }
            Some(c) => Err(self.error(format!("unexpected character `{c}`"))),
        }
    }

    /// After an element: consume a separator if present. Returns true when the
    /// container closes with `close`.
    fn separator(&mut self, close: char) -> Result<bool, SyntaxError> {
        self.skip_ws();
        while self.peek() == Some(',') {
            self.pos += 1;
            self.skip_ws();
        }
        match self.peek() {
            Some(c) if c == close => {
                self.pos += 1;
                Ok(true)
            }
            None => Err(self.error(format!("unclosed container, expected `{close}`"))),
            _ => Ok(false),
        }
    }

    fn object(&mut self, depth: usize) -> Result<Value, SyntaxError> {
        self.pos += 1;
        let mut map = Map::new();
        if self.separator('}')? {
            return Ok(Value::Object(map));
        }
        loop {
            let key = match self.peek() {
                Some(q @ ('"' | '\'')) => self.string(q)?,
                _ => return Err(self.error("expected a quoted key")),
            };
            self.skip_ws();
            if self.peek() != Some(':') {
                return Err(self.error(format!("expected `:` after key `{key}`")));
            }
            self.pos += 1;
            self.skip_ws();
            let v = self.value(depth + 1)?;
            if map.insert(key.clone(), v).is_some() {
                return Err(self.error(format!("duplicate key `{key}`")));
            }
            if self.separator('}')? {
                return Ok(Value::Object(map));
            }
        }
    }

    fn array(&mut self, depth: usize) -> Result<Value, SyntaxError> {
        self.pos += 1;
        let mut items = Vec::new();
        if self.separator(']')? {
            return Ok(Value::Array(items));
        }
        loop {
            items.push(self.value(depth + 1)?);
            if self.separator(']')? {
                return Ok(Value::Array(items));
            }
        }
    }

    fn string(&mut self, quote: char) -> Result<String, SyntaxError> {
        self.pos += 1;
        let mut out = String::new();
        loop {
            let Some(c) = self.peek() else {
                return Err(self.error("unterminated string"));
            };
            self.pos += 1;
            match c {
                c if c == quote => return Ok(out),
                '\\' => {
                    let Some(e) = self.peek() else {
                        return Err(self.error("unterminated escape"));
                    };
                    self.pos += 1;
                    match e {
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        'b' => out.push('\u{8}'),
                        'f' => out.push('\u{c}'),
                        'u' => out.push(self.unicode_escape()?),
                        other => out.push(other),
                    }
                }
                c => out.push(c),
            }
        }
    }

    fn hex4(&mut self) -> Result<u32, SyntaxError> {
        if self.pos + 4 > self.chars.len() {
            return Err(self.error("truncated \\u escape"));
        }
        let s: String = self.chars[self.pos..self.pos + 4].iter().collect();
        let v = u32::from_str_radix(&s, 16).map_err(|_| self.error(format!("bad \\u escape `{s}`")))?;
        self.pos += 4;
        Ok(v)
    }

    fn unicode_escape(&mut self) -> Result<char, SyntaxError> {
        let hi = self.hex4()?;
        if (0xD800..0xDC00).contains(&hi) && self.chars.get(self.pos..self.pos + 2) == Some(&['\\', 'u']) {
            self.pos += 2;
            let lo = self.hex4()?;
            let code = 0x10000 + ((hi - 0xD800) << 10) + (lo.wrapping_sub(0xDC00) & 0x3FF);
            return char::from_u32(code).ok_or_else(|| self.error("invalid surrogate pair"));
        }
        char::from_u32(hi).ok_or_else(|| self.error("invalid code point"))
    }

    fn number(&mut self) -> Result<Value, SyntaxError> {
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|c| c.is_ascii_digit() || matches!(c, '-' | '+' | '.' | 'e' | 'E'))
        {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        let s = s.strip_prefix('+').unwrap_or(&s);
        if let Ok(i) = s.parse::<i64>() {
            return Ok(Value::Number(i.into()));
        }
        match s.parse::<f64>().ok().and_then(Number::from_f64) {
            Some(n) => Ok(Value::Number(n)),
            None => {
                self.pos = start;
                Err(self.error(format!("invalid number `{s}`")))
            }
        }
    }
}
