//! API-call targets: `SELECT * FROM <domain> WHERE ...` and
//! `BOOK FROM <domain> WHERE ...`.
//!
//! A query is a token sequence such as
//! `SELECT * FROM hotel WHERE pricerange = cheap AND stars = 2`. The
//! canonical string form quotes every value with straight double quotes;
//! the parser also accepts single quotes, backtick/apostrophe pairs, doubled
//! typographic quotes and bare values.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QueryKind {
    Select,
    Book,
}

impl QueryKind {
    pub fn head(self) -> &'static [&'static str] {
        match self {
            QueryKind::Select => &["SELECT", "*", "FROM"],
            QueryKind::Book => &["BOOK", "FROM"],
        }
    }

    pub fn skill(self) -> &'static str {
        match self {
            QueryKind::Select => "SQL",
            QueryKind::Book => "BOOK",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    Eq,
    Less,
    Greater,
}

impl Relation {
    pub fn symbol(self) -> &'static str {
        match self {
            Relation::Eq => "=",
            Relation::Less => "<",
            Relation::Greater => ">",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "=" => Some(Relation::Eq),
            "<" => Some(Relation::Less),
            ">" => Some(Relation::Greater),
            _ => None,
        }
    }
}

/// One `slot <op> value` condition.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Clause {
    pub slot: String,
    pub relation: Relation,
    pub value: String,
}

impl Clause {
    pub fn eq(slot: &str, value: &str) -> Self {
        Clause { slot: slot.to_string(), relation: Relation::Eq, value: value.to_string() }
    }

    pub fn with(slot: &str, relation: Relation, value: &str) -> Self {
        Clause { slot: slot.to_string(), relation, value: value.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Query {
    pub kind: QueryKind,
    pub domain: String,
    pub clauses: Vec<Clause>,
}

/// Declared WHERE-clause order per domain.
pub fn slot_order(domain: &str) -> &'static [&'static str] {
    match domain {
        "hotel" => &["name", "area", "pricerange", "stars", "type", "parking", "internet", "people", "day", "stay"],
        "train" => &["destination", "day", "arriveBy", "departure", "leaveAt", "people"],
        "restaurant" => &["food", "area", "pricerange", "name", "time", "people", "day"],
        "taxi" => &["leaveAt", "destination", "departure", "arriveBy"],
        "attraction" => &["name", "area", "type"],
        "hospital" => &["department"],
        "police" => &["name"],
        "weather" => &["location", "date", "weather_attribute"],
        "schedule" => &["event", "date", "time", "party", "room", "agenda"],
        "navigate" => &["poi", "poi_type", "distance", "traffic_info", "address"],
        _ => &[],
    }
}

/// Domains with a declared slot order.
pub const DOMAINS: [&str; 10] = [
    "taxi",
    "police",
    "restaurant",
    "hospital",
    "hotel",
    "attraction",
    "train",
    "weather",
    "schedule",
    "navigate",
];

impl Query {
    /// Builds a query with clauses sorted into the domain's declared order.
    /// Slots the domain does not declare keep their relative order at the end.
    pub fn new(kind: QueryKind, domain: &str, clauses: &[Clause]) -> Result<Self> {
        if clauses.is_empty() {
            return Err(contract(format!("{} query on `{domain}` without slots", kind.skill())));
        }
        if domain.is_empty() || domain.contains(char::is_whitespace) {
            return Err(contract(format!("invalid domain `{domain}`")));
        }
        let order = slot_order(domain);
        let rank = |c: &Clause| order.iter().position(|s| *s == c.slot).unwrap_or(order.len());
        let mut sorted = clauses.to_vec();
        sorted.sort_by_key(rank);
        Ok(Query { kind, domain: domain.to_string(), clauses: sorted })
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = self.kind.head().iter().map(|s| s.to_string()).collect();
        out.push(self.domain.clone());
        out.push("WHERE".to_string());
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                out.push("AND".to_string());
            }
            out.push(c.slot.clone());
            out.push(c.relation.symbol().to_string());
            out.push(c.value.clone());
        }
        out
    }

    /// Canonical string: `slot="value"` for equality, `slot < "value"` otherwise.
    pub fn render(&self) -> String {
        let mut s = self.kind.head().join(" ");
        s.push(' ');
        s.push_str(&self.domain);
        s.push_str(" WHERE ");
        for (i, c) in self.clauses.iter().enumerate() {
            if i > 0 {
                s.push_str(" AND ");
            }
            match c.relation {
                Relation::Eq => s.push_str(&format!("{}=\"{}\"", c.slot, c.value)),
                r => s.push_str(&format!("{} {} \"{}\"", c.slot, r.symbol(), c.value)),
            }
        }
        s
    }

    /// Parses a token sequence produced by [`Query::tokens`].
    pub fn from_tokens<S: AsRef<str>>(tokens: &[S]) -> Result<Self> {
        let toks: Vec<&str> = tokens.iter().map(|t| t.as_ref()).collect();
        let bad = |detail: String| Error::Parse { line: 0, detail };
        let (kind, rest) = match toks.as_slice() {
            ["SELECT", "*", "FROM", rest @ ..] => (QueryKind::Select, rest),
            ["BOOK", "FROM", rest @ ..] => (QueryKind::Book, rest),
            _ => return Err(bad("query must start with `SELECT * FROM` or `BOOK FROM`".into())),
        };
        let (domain, rest) = match rest {
            [domain, "WHERE", rest @ ..] => (*domain, rest),
            _ => return Err(bad("expected `<domain> WHERE`".into())),
        };
        let mut clauses = Vec::new();
        let mut i = 0;
        loop {
            let [slot, op, value] = match rest.get(i..i + 3) {
                Some(&[a, b, c]) => [a, b, c],
                _ => return Err(bad(format!("incomplete clause at token {}", i))),
            };
            let relation = Relation::parse(op).ok_or_else(|| bad(format!("unknown operator `{op}`")))?;
            if !is_slot_name(slot) {
                return Err(bad(format!("invalid slot name `{slot}`")));
            }
            clauses.push(Clause::with(slot, relation, value));
            i += 3;
            match rest.get(i) {
                None => break,
                Some(t) if t.eq_ignore_ascii_case("AND") => i += 1,
                Some(t) => return Err(bad(format!("expected `AND`, found `{t}`"))),
            }
        }
        Ok(Query { kind, domain: domain.to_string(), clauses })
    }

    /// Parses the string form. Keywords `WHERE`/`AND` are case-insensitive.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse { line: 0, detail };
        let text = text.trim();
        let (kind, rest) = if let Some(r) = strip_keyword_seq(text, &["SELECT", "*", "FROM"]) {
            (QueryKind::Select, r)
        } else if let Some(r) = strip_keyword_seq(text, &["BOOK", "FROM"]) {
            (QueryKind::Book, r)
        } else {
            return Err(bad("query must start with `SELECT * FROM` or `BOOK FROM`".into()));
        };
        let rest = rest.trim_start();
        let domain_end = rest.find(char::is_whitespace).ok_or_else(|| bad("missing WHERE".into()))?;
        let domain = &rest[..domain_end];
        let rest = strip_keyword_seq(&rest[domain_end..], &["WHERE"]).ok_or_else(|| bad("missing WHERE".into()))?;
        let mut clauses = Vec::new();
        let mut cur = Cursor { s: rest, pos: 0 };
        loop {
            cur.skip_ws();
            let slot = cur.take_while(|c| c.is_alphanumeric() || c == '_');
            if slot.is_empty() {
                return Err(bad(format!("expected slot name at `{}`", cur.rest())));
            }
            cur.skip_ws();
            let op = cur.next_char().ok_or_else(|| bad("missing operator".into()))?;
            let relation = Relation::parse(op.encode_utf8(&mut [0; 4])).ok_or_else(|| bad(format!("unknown operator `{op}`")))?;
            cur.skip_ws();
            let value = cur.value().ok_or_else(|| bad(format!("bad value after `{slot}`")))?;
            clauses.push(Clause::with(slot, relation, &value));
            cur.skip_ws();
            if cur.rest().is_empty() {
                break;
            }
            let word = cur.take_while(|c| !c.is_whitespace());
            if !word.eq_ignore_ascii_case("AND") {
                return Err(bad(format!("expected `AND`, found `{word}`")));
            }
        }
        Ok(Query { kind, domain: domain.to_string(), clauses })
    }
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_alphanumeric() || c == '_')
}

fn strip_keyword_seq<'a>(text: &'a str, words: &[&str]) -> Option<&'a str> {
    let mut rest = text;
    for w in words {
        rest = rest.trim_start();
        let head = rest.get(..w.len())?;
        if !head.eq_ignore_ascii_case(w) {
            return None;
        }
        rest = &rest[w.len()..];
        if !(rest.is_empty() || rest.starts_with(char::is_whitespace)) {
            return None;
        }
    }
    Some(rest)
}

struct Cursor<'a> {
    s: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn skip_ws(&mut self) {
        let r = self.rest();
        self.pos += r.len() - r.trim_start().len();
    }

    fn next_char(&mut self) -> Option<char> {
        let c = self.rest().chars().next()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn take_while(&mut self, f: impl Fn(char) -> bool) -> &'a str {
        let r = self.rest();
        let end = r.find(|c| !f(c)).unwrap_or(r.len());
        self.pos += end;
        &r[..end]
    }

    /// Quoted or bare value. Recognised quote pairs: "..", '..', `..',
    /// ``..'' and the typographic pair.
    fn value(&mut self) -> Option<String> {
        const PAIRS: [(&str, &str); 6] = [
            ("``", "''"),
            ("\u{201c}", "\u{201d}"),
            ("\"", "\""),
            ("'", "'"),
            ("`", "'"),
            ("\u{2018}", "\u{2019}"),
        ];
        let r = self.rest();
        for (open, close) in PAIRS {
            if let Some(body) = r.strip_prefix(open) {
                let end = body.find(close)?;
                self.pos += open.len() + end + close.len();
                return Some(body[..end].to_string());
            }
        }
        let bare = self.take_while(|c| !c.is_whitespace());
        if bare.is_empty() {
            None
        } else {
            Some(bare.to_string())
        }
    }
}

/// `SELECT * FROM domain WHERE slot=value (AND slot=value)*` as tokens.
pub fn synthesize_sql_query(domain: &str, slots: &[Clause]) -> Result<Vec<String>> {
    Ok(Query::new(QueryKind::Select, domain, slots)?.tokens())
}

/// `BOOK FROM domain WHERE slot=value (AND slot=value)*` as tokens.
pub fn synthesize_book_query(domain: &str, slots: &[Clause]) -> Result<Vec<String>> {
    Ok(Query::new(QueryKind::Book, domain, slots)?.tokens())
}

/// Kind of the query in `tokens`, if it is one.
pub fn query_kind<S: AsRef<str>>(tokens: &[S]) -> Option<QueryKind> {
    match tokens.first().map(|t| t.as_ref()) {
        Some("SELECT") => Some(QueryKind::Select),
        Some("BOOK") => Some(QueryKind::Book),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn strs(v: &[String]) -> Vec<&str> {
        v.iter().map(String::as_str).collect()
    }

    #[test]
    fn hotel_select_follows_declared_order() {
        let q = synthesize_sql_query(
            "hotel",
            &[Clause::eq("type", "hotel"), Clause::eq("pricerange", "cheap"), Clause::eq("stars", "2")],
        )
        .unwrap();
        assert_eq!(
            strs(&q),
            vec!["SELECT", "*", "FROM", "hotel", "WHERE", "pricerange", "=", "cheap", "AND", "stars", "=", "2", "AND", "type", "=", "hotel"]
        );
    }

    #[test]
    fn single_slot_has_no_and() {
        let q = synthesize_book_query("taxi", &[Clause::eq("leaveAt", "1530")]).unwrap();
        assert!(!q.iter().any(|t| t == "AND"));
        let q = synthesize_sql_query("police", &[Clause::eq("name", "parkside")]).unwrap();
        assert!(!q.iter().any(|t| t == "AND"));
    }

    #[test]
    fn empty_slot_set_rejected() {
        assert!(matches!(synthesize_sql_query("hotel", &[]), Err(Error::Contract(_))));
        assert!(matches!(synthesize_book_query("hotel", &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn render_and_parse_agree() {
        let q = Query::new(
            QueryKind::Book,
            "hotel",
            &[Clause::eq("day", "monday"), Clause::eq("people", "1")],
        )
        .unwrap();
        assert_eq!(q.render(), "BOOK FROM hotel WHERE people=\"1\" AND day=\"monday\"");
        assert_eq!(Query::parse(&q.render()).unwrap(), q);
        assert_eq!(Query::from_tokens(&q.tokens()).unwrap(), q);
    }

    #[test]
    fn parser_accepts_mixed_quote_styles() {
        let q = Query::parse("SELECT * FROM hotel WHERE pricerange=`cheap' AND stars=2 AND type='hotel'").unwrap();
        assert_eq!(q.clauses[0], Clause::eq("pricerange", "cheap"));
        assert_eq!(q.clauses[1], Clause::eq("stars", "2"));
        assert_eq!(q.clauses[2], Clause::eq("type", "hotel"));
        let q = Query::parse("BOOK FROM hotel WHERE people=``1'' AND day=``monday''").unwrap();
        assert_eq!(q.clauses[1], Clause::eq("day", "monday"));
        let q = Query::parse("SELECT * FROM train WHERE arriveBy < \u{201c}1530\u{201d} and departure=\"london\"").unwrap();
        assert_eq!(q.clauses[0], Clause::with("arriveBy", Relation::Less, "1530"));
        assert_eq!(q.clauses[1].value, "london");
    }

    #[test]
    fn parser_rejects_malformed() {
        for bad in [
            "SELECT FROM hotel WHERE a=1",
            "SELECT * FROM hotel a=1",
            "SELECT * FROM hotel WHERE",
            "SELECT * FROM hotel WHERE a=1 OR b=2",
            "BOOK FROM hotel WHERE a ~ 1",
            "hello",
        ] {
            assert!(Query::parse(bad).is_err(), "{bad}");
        }
        assert!(Query::from_tokens(&["SELECT", "*", "FROM", "hotel", "WHERE", "a", "="]).is_err());
    }
}
