//! Structural unlinkability audit over retained election state.
//!
//! Retained state is serialized to JSON. An object is a record whose fields
//! belong together; an array is a collection of independent records. A
//! link is an object that names an id of one kind in its own fields (or in
//! nested objects) while its subtree names an id of the other kind, or a
//! single string naming both.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const VOTER_PREFIX: &str = "voter-";
pub const BALLOT_PREFIX: &str = "ballot-";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkPath {
    /// JSON pointer of the linking record, prefixed by the root name.
    pub at: String,
    pub voter_id: String,
    pub ballot_id: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAudit {
    pub records_scanned: u64,
    pub paths: Vec<LinkPath>,
}

impl LinkAudit {
    pub fn is_clean(&self) -> bool {
        self.paths.is_empty()
    }
}

#[derive(Default)]
struct Mentions {
    voters: BTreeSet<String>,
    ballots: BTreeSet<String>,
}

impl Mentions {
    fn extend(&mut self, o: Mentions) {
        self.voters.extend(o.voters);
        self.ballots.extend(o.ballots);
    }
}

struct Auditor<'a> {
    voters: &'a BTreeSet<String>,
    ballots: &'a BTreeSet<String>,
    out: LinkAudit,
}

fn ids_in(s: &str, prefix: &str, known: &BTreeSet<String>) -> Vec<String> {
    s.match_indices(prefix)
        .filter_map(|(i, _)| {
            let tail = &s[i..];
            let end = tail[prefix.len()..]
                .find(|c: char| !c.is_ascii_alphanumeric())
                .map_or(tail.len(), |e| e + prefix.len());
            known.get(&tail[..end]).cloned()
        })
        .collect()
}

impl Auditor<'_> {
    fn report(&mut self, at: &str, m: &Mentions) {
        if let (Some(v), Some(b)) = (m.voters.first(), m.ballots.first()) {
            self.out.paths.push(LinkPath {
                at: at.to_string(),
                voter_id: v.clone(),
                ballot_id: b.clone(),
            });
        }
    }

    /// Returns `(own, subtree)` mentions: `own` excludes anything below an
    /// array.
    fn visit(&mut self, v: &Value, at: &str) -> (Mentions, Mentions) {
        match v {
            Value::String(s) => {
                let m = Mentions {
                    voters: ids_in(s, VOTER_PREFIX, self.voters).into_iter().collect(),
                    ballots: ids_in(s, BALLOT_PREFIX, self.ballots).into_iter().collect(),
                };
                self.report(at, &m);
                let sub = Mentions {
                    voters: m.voters.clone(),
                    ballots: m.ballots.clone(),
                };
                (m, sub)
            }
            Value::Array(items) => {
                let mut sub = Mentions::default();
                for (i, item) in items.iter().enumerate() {
                    sub.extend(self.visit(item, &format!("{at}/{i}")).1);
                }
                (Mentions::default(), sub)
            }
            Value::Object(map) => {
                self.out.records_scanned += 1;
                let (mut own, mut sub) = (Mentions::default(), Mentions::default());
                for (k, child) in map {
                    let key = Value::String(k.clone());
                    let (ko, ks) = self.visit(&key, at);
                    own.extend(ko);
                    sub.extend(ks);
                    let (co, cs) = self.visit(child, &format!("{at}/{k}"));
                    own.extend(co);
                    sub.extend(cs);
                }
                let crosses = (!own.voters.is_empty() && !sub.ballots.is_empty())
                    || (!own.ballots.is_empty() && !sub.voters.is_empty());
                if crosses {
                    let m = Mentions {
                        voters: if own.voters.is_empty() {
                            sub.voters.clone()
                        } else {
                            own.voters.clone()
                        },
                        ballots: if own.ballots.is_empty() {
                            sub.ballots.clone()
                        } else {
                            own.ballots.clone()
                        },
                    };
                    self.report(at, &m);
                }
                (own, sub)
            }
            _ => (Mentions::default(), Mentions::default()),
        }
    }
}

/// Audits named roots against the known voter and ballot ids.
pub fn audit_links(
    roots: &[(&str, Value)],
    voter_ids: &BTreeSet<String>,
    ballot_ids: &BTreeSet<String>,
) -> LinkAudit {
    let mut a = Auditor {
        voters: voter_ids,
        ballots: ballot_ids,
        out: LinkAudit::default(),
    };
    for (name, v) in roots {
        a.visit(v, name);
    }
    a.out
}
