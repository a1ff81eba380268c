//! `$name` / `${name}` variable substitution.
//!
//! `$jobid` expands to the job identifier and `$$` to a literal `$`. A `$`
//! that does not start a reference is kept as is.

use std::collections::BTreeMap;

use thiserror::Error;

use super::task::Value;

pub const JOBID: &str = "jobid";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubstError {
    #[error("unbound variable ${0}")]
    UnboundVariable(String),
    #[error("unterminated ${{ in {0:?}")]
    Unterminated(String),
}

enum Piece<'a> {
    Lit(&'a str),
    Dollar,
    Ref(&'a str),
}

fn is_name_start(c: u8) -> bool {
    c.is_ascii_alphabetic() || c == b'_'
}

fn is_name_char(c: u8) -> bool {
    c.is_ascii_alphanumeric() || c == b'_'
}

fn tokenize(text: &str) -> Result<Vec<Piece<'_>>, SubstError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'$' {
            i += 1;
            continue;
        }
        let next = bytes.get(i + 1).copied();
        let (piece, end) = match next {
            Some(b'$') => (Piece::Dollar, i + 2),
            Some(b'{') => {
                let close = text[i + 2..]
                    .find('}')
                    .ok_or_else(|| SubstError::Unterminated(text.to_string()))?;
                (Piece::Ref(&text[i + 2..i + 2 + close]), i + 3 + close)
            }
            Some(c) if is_name_start(c) => {
                let mut j = i + 1;
                while j < bytes.len() && is_name_char(bytes[j]) {
                    j += 1;
                }
                (Piece::Ref(&text[i + 1..j]), j)
            }
            _ => {
                i += 1;
                continue;
            }
        };
        if lit_start < i {
            out.push(Piece::Lit(&text[lit_start..i]));
        }
        out.push(piece);
        i = end;
        lit_start = end;
    }
    if lit_start < bytes.len() {
        out.push(Piece::Lit(&text[lit_start..]));
    }
    Ok(out)
}

/// Replaces variable references in `text` with their rendered bindings.
pub fn substitute(text: &str, bindings: &BTreeMap<String, Value>, job_id: &str) -> Result<String, SubstError> {
    if !text.contains('$') {
        return Ok(text.to_string());
    }
    let mut out = String::with_capacity(text.len());
    for piece in tokenize(text)? {
        match piece {
            Piece::Lit(s) => out.push_str(s),
            Piece::Dollar => out.push('$'),
            Piece::Ref(JOBID) => out.push_str(job_id),
            Piece::Ref(name) => {
                let v = bindings
                    .get(name)
                    .ok_or_else(|| SubstError::UnboundVariable(name.to_string()))?;
                out.push_str(&v.render());
            }
        }
    }
    Ok(out)
}

/// Variable names referenced by `text`, excluding `$jobid`.
pub fn references(text: &str) -> Result<Vec<String>, SubstError> {
    Ok(tokenize(text)?
        .into_iter()
        .filter_map(|p| match p {
            Piece::Ref(n) if n != JOBID => Some(n.to_string()),
            _ => None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn basic() {
        assert_eq!(substitute("run -x $x", &b(&[("x", Value::Integer(5))]), "j1").unwrap(), "run -x 5");
        assert_eq!(substitute("out.$jobid.dat", &b(&[]), "j7").unwrap(), "out.j7.dat");
        assert_eq!(
            substitute("cost $$5 $y", &b(&[]), "j1").unwrap_err(),
            SubstError::UnboundVariable("y".into())
        );
    }

    #[test]
    fn braces_and_escapes() {
        let bs = b(&[("n", Value::String("abc".into()))]);
        assert_eq!(substitute("${n}_x $$n $", &bs, "j").unwrap(), "abc_x $n $");
        assert_eq!(substitute("a$-b", &bs, "j").unwrap(), "a$-b");
        assert!(matches!(substitute("${n", &bs, "j"), Err(SubstError::Unterminated(_))));
    }

    #[test]
    fn reference_scan() {
        assert_eq!(references("$a ${b} $jobid $$c").unwrap(), vec!["a", "b"]);
    }

    proptest! {
        #[test]
        fn no_dollar_is_identity(s in "[^$]*") {
            prop_assert_eq!(substitute(&s, &BTreeMap::new(), "j1").unwrap(), s);
        }

        #[test]
        fn substitution_is_deterministic(s in "[a-z$ {}]{0,24}") {
            let bs = b(&[("a", Value::Integer(1)), ("b", Value::Float(0.5))]);
            prop_assert_eq!(substitute(&s, &bs, "j").ok(), substitute(&s, &bs, "j").ok());
        }
    }
}
