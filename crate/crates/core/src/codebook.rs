//! Codebook reduction: merge duplicate and near-duplicate codes of one kind
//! while keeping every quote and its provenance.
//!
//! Two codes are linked when their normalized names are equal or their
//! normalized Levenshtein similarity reaches the threshold. Groups are the
//! transitive closure of that relation, so the result does not depend on the
//! order in which pairs are compared.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{Code, CodeKind, Provenance};

pub const DEFAULT_SIMILARITY_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodebookError {
    #[error("cannot reduce codes of mixed kinds: {0} and {1}")]
    MixedKinds(CodeKind, CodeKind),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuoteRef {
    pub quote: String,
    pub interview_id: String,
    pub chunk_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedCode {
    pub code_id: String,
    pub name: String,
    pub description: String,
    pub aliases: Vec<String>,
    pub quotes: Vec<QuoteRef>,
    /// Ids of the raw codes folded into this entry.
    pub member_code_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub left: String,
    pub right: String,
    pub similarity: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeLog {
    pub threshold: f64,
    pub decisions: Vec<MergeDecision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub kind: CodeKind,
    pub entries: Vec<MergedCode>,
    pub reduction_report: MergeLog,
}

impl Codebook {
    pub fn empty(kind: CodeKind, threshold: f64) -> Self {
        Self {
            kind,
            entries: Vec::new(),
            reduction_report: MergeLog {
                threshold,
                decisions: Vec::new(),
            },
        }
    }

    pub fn entry(&self, code_id: &str) -> Option<&MergedCode> {
        self.entries.iter().find(|e| e.code_id == code_id)
    }

    pub fn provenance_pairs(&self) -> usize {
        self.entries.iter().map(|e| e.quotes.len()).sum()
    }

    /// Expand entries back into raw codes, one per quote, carrying the
    /// entry's representative name and description.
    pub fn to_codes(&self) -> Vec<Code> {
        self.entries
            .iter()
            .flat_map(|e| {
                e.quotes.iter().enumerate().map(move |(i, q)| Code {
                    code_id: format!("{}#{i:03}", e.code_id),
                    kind: self.kind,
                    name: e.name.clone(),
                    description: e.description.clone(),
                    quote: q.quote.clone(),
                    provenance: vec![Provenance {
                        interview_id: q.interview_id.clone(),
                        chunk_id: q.chunk_id.clone(),
                    }],
                })
            })
            .collect()
    }
}

/// Lowercase, collapse whitespace and strip leading/trailing punctuation.
pub fn normalize_name(name: &str) -> String {
    let lower = name.to_lowercase();
    let collapsed = crate::text::normalize_ws(&lower);
    collapsed.trim_matches(|c: char| !c.is_alphanumeric()).to_string()
}

/// Normalized Levenshtein similarity of two already-normalized names.
pub fn name_similarity(a: &str, b: &str) -> f64 {
    strsim::normalized_levenshtein(a, b)
}

/// Whether two normalized names should merge at `threshold`.
pub fn names_link(a: &str, b: &str, threshold: f64) -> Option<MergeDecisionKind> {
    if a == b {
        return Some(MergeDecisionKind {
            similarity: 1.0,
            exact: true,
        });
    }
    let similarity = name_similarity(a, b);
    (similarity >= threshold).then_some(MergeDecisionKind {
        similarity,
        exact: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeDecisionKind {
    pub similarity: f64,
    pub exact: bool,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so group order is stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

pub fn reduce(raw: &[Code]) -> Result<Codebook, CodebookError> {
    reduce_with_threshold(raw, DEFAULT_SIMILARITY_THRESHOLD)
}

/// Merge `raw` codes of a single kind. Inputs are sorted by `code_id` first.
pub fn reduce_with_threshold(raw: &[Code], threshold: f64) -> Result<Codebook, CodebookError> {
    let Some(first) = raw.first() else {
        return Ok(Codebook::empty(CodeKind::Behaviour, threshold));
    };
    if let Some(other) = raw.iter().find(|c| c.kind != first.kind) {
        return Err(CodebookError::MixedKinds(first.kind, other.kind));
    }
    let mut codes: Vec<&Code> = raw.iter().collect();
    codes.sort_by(|a, b| a.code_id.cmp(&b.code_id));
    let names: Vec<String> = codes.iter().map(|c| normalize_name(&c.name)).collect();

    let mut uf = UnionFind::new(codes.len());
    let mut decisions = Vec::new();
    for i in 0..codes.len() {
        for j in (i + 1)..codes.len() {
            if let Some(link) = names_link(&names[i], &names[j], threshold) {
                uf.union(i, j);
                decisions.push(MergeDecision {
                    left: codes[i].code_id.clone(),
                    right: codes[j].code_id.clone(),
                    similarity: link.similarity,
                    exact: link.exact,
                });
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_root = std::collections::HashMap::new();
    for i in 0..codes.len() {
        let root = uf.find(i);
        let g = *group_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }

    let entries = groups
        .into_iter()
        .map(|members| {
            let rep = members
                .iter()
                .copied()
                .max_by(|&a, &b| {
                    let (la, lb) = (
                        codes[a].description.chars().count(),
                        codes[b].description.chars().count(),
                    );
                    // ties go to the earlier code
                    la.cmp(&lb).then(b.cmp(&a))
                })
                .expect("groups are non-empty");
            let rep_code = codes[rep];
            let mut seen = BTreeSet::new();
            let aliases = members
                .iter()
                .map(|&m| &codes[m].name)
                .filter(|n| **n != rep_code.name && seen.insert((*n).clone()))
                .cloned()
                .collect();
            let quotes = members
                .iter()
                .flat_map(|&m| {
                    let c = codes[m];
                    c.provenance.iter().map(move |p| QuoteRef {
                        quote: c.quote.clone(),
                        interview_id: p.interview_id.clone(),
                        chunk_id: p.chunk_id.clone(),
                    })
                })
                .collect();
            MergedCode {
                code_id: rep_code.code_id.clone(),
                name: rep_code.name.clone(),
                description: rep_code.description.clone(),
                aliases,
                quotes,
                member_code_ids: members.iter().map(|&m| codes[m].code_id.clone()).collect(),
            }
        })
        .collect();

    Ok(Codebook {
        kind: first.kind,
        entries,
        reduction_report: MergeLog { threshold, decisions },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionStats {
    pub raw: usize,
    pub unique: usize,
    pub merges: usize,
    pub largest_group: usize,
}

pub fn reduction_stats(codebook: &Codebook) -> ReductionStats {
    let raw = codebook.entries.iter().map(|e| e.member_code_ids.len()).sum();
    let unique = codebook.entries.len();
    ReductionStats {
        raw,
        unique,
        merges: raw - unique,
        largest_group: codebook
            .entries
            .iter()
            .map(|e| e.member_code_ids.len())
            .max()
            .unwrap_or(0),
    }
}

/// Plain-text merge log: one line per linked pair, then the groups.
pub fn render_merge_log(codebook: &Codebook) -> String {
    let stats = reduction_stats(codebook);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {} codebook: {} raw codes -> {} unique (threshold {:.2})",
        codebook.kind, stats.raw, stats.unique, codebook.reduction_report.threshold
    );
    for d in &codebook.reduction_report.decisions {
        let how = if d.exact {
            "exact".to_string()
        } else {
            format!("{:.3}", d.similarity)
        };
        let _ = writeln!(out, "link {} ~ {} ({how})", d.left, d.right);
    }
    for e in codebook.entries.iter().filter(|e| e.member_code_ids.len() > 1) {
        let _ = writeln!(
            out,
            "group {} \"{}\": {}",
            e.code_id,
            e.name,
            e.member_code_ids.join(", ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(id: &str, name: &str, desc: &str) -> Code {
        Code {
            code_id: id.into(),
            kind: CodeKind::Goal,
            name: name.into(),
            description: desc.into(),
            quote: format!("quote of {id}"),
            provenance: vec![Provenance {
                interview_id: "iv".into(),
                chunk_id: format!("chunk-{id}"),
            }],
        }
    }

    #[test]
    fn normalization_table() {
        assert_eq!(normalize_name("Problem-solving online "), "problem-solving online");
        assert_eq!(normalize_name("problem-solving online"), "problem-solving online");
        assert_eq!(normalize_name("\u{201c}Validation\u{201d}"), "validation");
        assert_eq!(
            normalize_name("  \"Trustworthy   Information.\" "),
            "trustworthy information"
        );
        assert_eq!(normalize_name("(Open-mindedness)"), "open-mindedness");
        assert_eq!(normalize_name("..."), "");
    }

    #[test]
    fn exact_duplicates_merge() {
        let raw = vec![
            code("a", "Trustworthy Information", "short"),
            code("b", "Trustworthy Information", "a longer description"),
        ];
        let cb = reduce(&raw).unwrap();
        assert_eq!(cb.entries.len(), 1);
        let e = &cb.entries[0];
        assert_eq!(e.quotes.len(), 2);
        assert_eq!(e.description, "a longer description");
        assert_eq!(e.code_id, "b");
        assert!(e.aliases.is_empty());
        assert!(cb.reduction_report.decisions[0].exact);
    }

    #[test]
    fn near_duplicates_merge_and_keep_alias() {
        let raw = vec![
            code("a", "Clear explanation of regulations", "x"),
            code("b", "Clear explanations of regulations", "y"),
            code("c", "Weather data", "z"),
        ];
        let cb = reduce(&raw).unwrap();
        assert_eq!(cb.entries.len(), 2);
        assert_eq!(
            cb.entries[0].aliases,
            vec!["Clear explanations of regulations".to_string()]
        );
    }

    #[test]
    fn mixed_kinds_rejected() {
        let mut b = code("b", "x", "x");
        b.kind = CodeKind::Behaviour;
        assert!(matches!(
            reduce(&[code("a", "x", "x"), b]),
            Err(CodebookError::MixedKinds(..))
        ));
    }

    #[test]
    fn stats_arithmetic() {
        // 10 codes, two of them duplicates of others
        let words = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];
        let mut raw: Vec<Code> = words
            .iter()
            .enumerate()
            .map(|(i, w)| code(&format!("c{i}"), w, "d"))
            .collect();
        raw.push(code("c8", "Alpha", "d"));
        raw.push(code("c9", "bravo.", "d"));
        let stats = reduction_stats(&reduce(&raw).unwrap());
        assert_eq!((stats.raw, stats.unique, stats.merges), (10, 8, 2));
        assert_eq!(stats.largest_group, 2);
    }

    #[test]
    fn empty_input_all_zero() {
        let cb = reduce(&[]).unwrap();
        assert_eq!(reduction_stats(&cb), ReductionStats::default());
    }

    #[test]
    fn transitive_chain_merges() {
        // a~b and b~c at 0.9 but a and c further apart
        let raw = vec![
            code("1", "abcdefghij", "d"),
            code("2", "abcdefghiX", "d"),
            code("3", "abcdefghXX", "d"),
        ];
        assert!(name_similarity("abcdefghij", "abcdefghxx") < 0.9);
        let cb = reduce(&raw).unwrap();
        assert_eq!(cb.entries.len(), 1);
    }

    #[test]
    fn merge_log_mentions_groups() {
        let raw = vec![code("a", "Same", "d"), code("b", "same", "d")];
        let log = render_merge_log(&reduce(&raw).unwrap());
        assert!(log.contains("link a ~ b (exact)"));
        assert!(log.contains("group a"));
    }
}
