//! Conjunctive query language over indexed records.
//!
//! ```text
//! query  := clause ("&&" clause)*
//! clause := ["!"] pred
//! pred   := "exists(" id ")" | "state(" id ")=" label | "conf(" id ")>=" number
//! ```
//!
//! Whitespace between tokens is ignored. Ids and labels are bare tokens of
//! letters, digits, `_`, `-` and `.`.

use std::fmt;

use thiserror::Error;

use crate::ontology::ComponentOntology;
use crate::record::ImageResult;

#[derive(Debug, Clone, PartialEq)]
pub enum Predicate {
    Exists(String),
    State(String, String),
    MinConf(String, f64),
}

impl Predicate {
    pub fn component(&self) -> &str {
        match self {
            Predicate::Exists(c) | Predicate::State(c, _) | Predicate::MinConf(c, _) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clause {
    pub negated: bool,
    pub predicate: Predicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub clauses: Vec<Clause>,
}

impl fmt::Display for QuerySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                f.write_str(" && ")?;
            }
            if c.negated {
                f.write_str("!")?;
            }
            match &c.predicate {
                Predicate::Exists(id) => write!(f, "exists({id})")?,
                Predicate::State(id, label) => write!(f, "state({id})={label}")?,
                Predicate::MinConf(id, t) => write!(f, "conf({id})>={t}")?,
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("syntax error at byte {offset}: expected {}, found {found}", expected.join(" or "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<&'static str>,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QueryError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("query references unknown component \"{0}\"")]
    UnknownComponent(String),
}

fn is_bare(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.')
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        let rest = &self.src[self.pos..];
        self.pos += rest.len() - rest.trim_start().len();
    }

    fn found(&self) -> String {
        match self.src[self.pos..].chars().next() {
            Some(c) => format!("'{c}'"),
            None => "end of input".to_string(),
        }
    }

    fn fail<T>(&self, expected: Vec<&'static str>) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.pos,
            expected,
            found: self.found(),
        })
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &'static str) -> Result<(), ParseError> {
        if self.eat(token) {
            Ok(())
        } else {
            self.fail(vec![token])
        }
    }

    fn bare(&mut self, what: &'static str) -> Result<&'a str, ParseError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest.find(|c: char| !is_bare(c)).unwrap_or(rest.len());
        if len == 0 {
            return self.fail(vec![what]);
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn predicate(&mut self) -> Result<Predicate, ParseError> {
        self.skip_ws();
        let start = self.pos;
        let keyword = self.bare("predicate").ok();
        match keyword {
            Some("exists") => {
                self.expect("(")?;
                let id = self.bare("component id")?.to_string();
                self.expect(")")?;
                Ok(Predicate::Exists(id))
            }
            Some("state") => {
                self.expect("(")?;
                let id = self.bare("component id")?.to_string();
                self.expect(")")?;
                self.expect("=")?;
                let label = self.bare("state label")?.to_string();
                Ok(Predicate::State(id, label))
            }
            Some("conf") => {
                self.expect("(")?;
                let id = self.bare("component id")?.to_string();
                self.expect(")")?;
                self.expect(">=")?;
                self.skip_ws();
                let at = self.pos;
                let token = self.bare("number")?;
                match token.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Predicate::MinConf(id, v)),
                    _ => Err(ParseError {
                        offset: at,
                        expected: vec!["number"],
                        found: format!("'{token}'"),
                    }),
                }
            }
            _ => {
                self.pos = start;
                self.fail(vec!["exists(", "state(", "conf("])
            }
        }
    }

    fn query(&mut self) -> Result<QuerySpec, ParseError> {
        let mut clauses = Vec::new();
        loop {
            let negated = self.eat("!");
            clauses.push(Clause {
                negated,
                predicate: self.predicate()?,
            });
            if !self.eat("&&") {
                break;
            }
        }
        self.skip_ws();
        if self.pos != self.src.len() {
            return self.fail(vec!["&&", "end of input"]);
        }
        Ok(QuerySpec { clauses })
    }
}

pub fn parse_query(text: &str) -> Result<QuerySpec, ParseError> {
    Parser { src: text, pos: 0 }.query()
}

impl QuerySpec {
    pub fn validate(&self, ontology: &ComponentOntology) -> Result<(), QueryError> {
        for c in &self.clauses {
            let id = c.predicate.component();
            if !ontology.contains(id) {
                return Err(QueryError::UnknownComponent(id.to_string()));
            }
        }
        Ok(())
    }

    pub fn matches(&self, result: &ImageResult) -> bool {
        self.clauses.iter().all(|clause| {
            let record = result.record(clause.predicate.component());
            let holds = match (&clause.predicate, record) {
                (_, None) => false,
                (Predicate::Exists(_), Some(r)) => r.exists(),
                (Predicate::State(_, label), Some(r)) => r.exists() && r.state == *label,
                (Predicate::MinConf(_, t), Some(r)) => r.confidence >= *t,
            };
            holds != clause.negated
        })
    }
}

/// Image ids matching every clause, in input order. Images that failed
/// during indexing never match.
pub fn evaluate_query<'a, I>(spec: &QuerySpec, ontology: &ComponentOntology, results: I) -> Result<Vec<String>, QueryError>
where
    I: IntoIterator<Item = &'a ImageResult>,
{
    spec.validate(ontology)?;
    Ok(results
        .into_iter()
        .filter(|r| !r.is_failed() && spec.matches(r))
        .map(|r| r.image_id.clone())
        .collect())
}
