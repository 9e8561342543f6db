//! Tab-separated dumps of the skill weights used per example.

use std::fmt::Write as _;

/// Header `id` followed by the skill names, then one row per example.
pub fn alpha_tsv(skills: &[String], rows: &[(String, Vec<f64>)]) -> String {
    let mut s = String::from("id");
    for k in skills {
        s.push('\t');
        s.push_str(k);
    }
    s.push('\n');
    for (id, alpha) in rows {
        s.push_str(id);
        for a in alpha {
            let _ = write!(s, "\t{a}");
        }
        s.push('\n');
    }
    s
}
