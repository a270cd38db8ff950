//! Theme generation: group codebook entries into named themes, validate the
//! membership the model returned and split themes that would not fit the
//! per-theme token budget.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::codebook::Codebook;
use crate::coding::complete_with_reminder;
use crate::coding::CodeKind;
use crate::gateway::{stage, Gateway, GatewayError, TokenEstimator};
use crate::json_extract;
use crate::text;

/// Theme counts requested per kind when nothing else is configured.
pub fn default_theme_count(kind: CodeKind) -> usize {
    match kind {
        CodeKind::PersonalityTrait => 8,
        _ => 11,
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ThemeError {
    #[error("grouping needs at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("cannot group an empty {0} codebook")]
    EmptyCodebook(CodeKind),
    #[error("code {code_id} in theme {theme_id} alone needs {estimate} tokens, over the per-theme budget of {budget}")]
    MemberTooLarge {
        theme_id: String,
        code_id: String,
        estimate: usize,
        budget: usize,
    },
    #[error("per-theme token budget must be positive")]
    ZeroBudget,
}

/// Everything a persona prompt needs about one member code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeMember {
    pub code_id: String,
    pub name: String,
    pub description: String,
    pub quotes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub theme_id: String,
    pub kind: CodeKind,
    pub name: String,
    pub description: String,
    pub member_code_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part_count: Option<usize>,
    pub members: Vec<ThemeMember>,
}

impl Theme {
    /// Name without any `(part N)` suffix.
    pub fn base_name(&self) -> &str {
        match self.part_index {
            Some(i) => self.name.strip_suffix(&format!(" (part {i})")).unwrap_or(&self.name),
            None => &self.name,
        }
    }

    pub fn quotes(&self) -> impl Iterator<Item = &str> {
        self.members.iter().flat_map(|m| m.quotes.iter().map(String::as_str))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeSet {
    pub kind: CodeKind,
    pub themes: Vec<Theme>,
    pub requested_count: usize,
}

impl ThemeSet {
    /// Themes counted without parts.
    pub fn base_theme_count(&self) -> usize {
        self.themes.iter().map(Theme::base_name).collect::<BTreeSet<_>>().len()
    }

    pub fn theme(&self, theme_id: &str) -> Option<&Theme> {
        self.themes.iter().find(|t| t.theme_id == theme_id)
    }

    /// Every member id must exist in `codebook` and match the embedded payload.
    pub fn check_integrity(&self, codebook: &Codebook) -> Result<(), String> {
        for t in &self.themes {
            if t.member_code_ids.is_empty() {
                return Err(format!("theme {} has no members", t.theme_id));
            }
            let payload_ids: Vec<&str> = t.members.iter().map(|m| m.code_id.as_str()).collect();
            let ids: Vec<&str> = t.member_code_ids.iter().map(String::as_str).collect();
            if payload_ids != ids {
                return Err(format!("theme {} payload does not match its member ids", t.theme_id));
            }
            if let Some(missing) = ids.iter().find(|id| codebook.entry(id).is_none()) {
                return Err(format!("theme {} references unknown code {missing}", t.theme_id));
            }
            if t.part_index.is_some() != t.part_count.is_some() {
                return Err(format!("theme {} has inconsistent part fields", t.theme_id));
            }
            if let (Some(i), Some(n)) = (t.part_index, t.part_count) {
                if i == 0 || i > n {
                    return Err(format!("theme {} part {i} of {n}", t.theme_id));
                }
            }
        }
        Ok(())
    }
}

fn topic_line(index: usize, name: &str, description: &str) -> String {
    format!(
        "{index}. {}: {}",
        text::normalize_ws(name),
        text::normalize_ws(description)
    )
}

pub fn build_grouping_prompt(codebook: &Codebook, n_groups: usize) -> Result<String, ThemeError> {
    if n_groups < 2 {
        return Err(ThemeError::TooFewGroups(n_groups));
    }
    if codebook.entries.is_empty() {
        return Err(ThemeError::EmptyCodebook(codebook.kind));
    }
    let topics: Vec<String> = codebook
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| topic_line(i + 1, &e.name, &e.description))
        .collect();
    Ok(format!(
        "Determine how all the topics in the following list of topics can be grouped together, and topics can also be in more than one group.\n\n\
         Group all the topics numbers only and provide a name and a description for each group\n\n\
         Create {n_groups} significant groups\n\n\
         Display the full list\n\n\
         Format the response as a json file with the key 'groups', where each group has a 'name', a 'description' and 'topics', the list of its topic numbers.\n\n\
         List of topics:\n{}",
        topics.join("\n")
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct RawGroup {
    name: String,
    description: String,
    topics: Vec<i64>,
}

fn topic_numbers(v: &Value) -> Vec<i64> {
    let from_str = |s: &str| -> Vec<i64> {
        let re = Regex::new(r"-?\d+").expect("static regex");
        re.find_iter(s).filter_map(|m| m.as_str().parse().ok()).collect()
    };
    match v {
        Value::Array(items) => items
            .iter()
            .flat_map(|i| match i {
                Value::Number(n) => n.as_i64().into_iter().collect(),
                Value::String(s) => from_str(s),
                _ => Vec::new(),
            })
            .collect(),
        Value::String(s) => from_str(s),
        Value::Number(n) => n.as_i64().into_iter().collect(),
        _ => Vec::new(),
    }
}

fn groups_from_json(doc: &Value) -> Option<Vec<RawGroup>> {
    let list: Vec<(Option<&str>, &Value)> = match doc {
        Value::Array(items) => items.iter().map(|v| (None, v)).collect(),
        Value::Object(map) => {
            let inner = ["groups", "themes"].iter().find_map(|k| json_extract::get_ci(map, k));
            match inner {
                Some(Value::Array(items)) => items.iter().map(|v| (None, v)).collect(),
                Some(Value::Object(named)) => named.iter().map(|(k, v)| (Some(k.as_str()), v)).collect(),
                _ => return None,
            }
        }
        _ => return None,
    };
    let groups: Vec<RawGroup> = list
        .into_iter()
        .filter_map(|(key, v)| {
            let map = v.as_object()?;
            let name = json_extract::string_field(map, &["name", "title", "theme", "group"])
                .or_else(|| key.map(str::to_string))?;
            let description = json_extract::string_field(map, &["description", "desc", "summary"]).unwrap_or_default();
            let topics = ["topics", "topic_numbers", "topic numbers", "codes", "members"]
                .iter()
                .find_map(|k| json_extract::get_ci(map, k))
                .map(topic_numbers)
                .unwrap_or_default();
            Some(RawGroup {
                name,
                description,
                topics,
            })
        })
        .collect();
    (!groups.is_empty()).then_some(groups)
}

/// Numbered-list replies of the form
///
/// ```text
/// Group 1: Name
/// Description: ...
/// Topics: 1, 4, 7
/// ```
fn groups_from_list(reply: &str) -> Option<Vec<RawGroup>> {
    let header =
        Regex::new(r"(?i)^\s*(?:#+\s*)?\**\s*(?:group|theme)\s*\d+\s*\**\s*[:.\-)]\s*\**\s*(?P<name>.+?)\s*\**\s*$")
            .expect("static regex");
    let field = Regex::new(
        r"(?i)^\s*[-*]?\s*\**\s*(?P<key>name|description|topics?(?: numbers)?)\s*\**\s*:\s*\**\s*(?P<val>.*)$",
    )
    .expect("static regex");
    let mut groups: Vec<RawGroup> = Vec::new();
    for line in reply.lines() {
        if let Some(c) = field.captures(line) {
            let Some(g) = groups.last_mut() else { continue };
            let val = c["val"].trim().trim_matches('*').trim();
            match c["key"].to_lowercase().as_str() {
                "name" => g.name = val.to_string(),
                "description" => g.description = val.to_string(),
                _ => g.topics.extend(topic_numbers(&Value::String(val.to_string()))),
            }
        } else if let Some(c) = header.captures(line) {
            let raw = c["name"].trim();
            let (name, description) = match raw.split_once(" - ") {
                Some((n, d)) => (n.trim(), d.trim()),
                None => (raw, ""),
            };
            groups.push(RawGroup {
                name: name.to_string(),
                description: description.to_string(),
                topics: Vec::new(),
            });
        }
    }
    groups.retain(|g| !g.name.is_empty());
    (!groups.is_empty()).then_some(groups)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedThemes {
    pub set: ThemeSet,
    pub warnings: Vec<String>,
}

fn members_for(codebook: &Codebook, ids: &[String]) -> Vec<ThemeMember> {
    ids.iter()
        .filter_map(|id| codebook.entry(id))
        .map(|e| {
            let mut seen = HashSet::new();
            ThemeMember {
                code_id: e.code_id.clone(),
                name: e.name.clone(),
                description: e.description.clone(),
                quotes: e
                    .quotes
                    .iter()
                    .filter(|q| seen.insert(q.quote.as_str()))
                    .map(|q| q.quote.clone())
                    .collect(),
            }
        })
        .collect()
}

/// Parse a grouping reply into a [`ThemeSet`]. JSON is tried first, then
/// the numbered-list layout.
pub fn parse_themes(
    response_text: &str,
    codebook: &Codebook,
    requested_count: usize,
) -> Result<ParsedThemes, GatewayError> {
    let groups = json_extract::parse_relaxed(response_text)
        .ok()
        .and_then(|doc| groups_from_json(&doc))
        .or_else(|| groups_from_list(response_text))
        .ok_or_else(|| GatewayError::malformed("reply contains no recognizable groups"))?;

    let kind = codebook.kind;
    let mut warnings = Vec::new();
    let mut themes: Vec<Theme> = Vec::new();
    let mut names = HashSet::new();
    for group in groups {
        let mut ids = Vec::new();
        for &n in &group.topics {
            if n < 1 || n as usize > codebook.entries.len() {
                warnings.push(format!(
                    "{kind}: group \"{}\" references topic {n} of {}; dropped",
                    group.name,
                    codebook.entries.len()
                ));
                continue;
            }
            let id = codebook.entries[n as usize - 1].code_id.clone();
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        if ids.is_empty() {
            warnings.push(format!("{kind}: group \"{}\" has no valid topics; dropped", group.name));
            continue;
        }
        let mut name = text::normalize_ws(&group.name);
        if !names.insert(name.to_lowercase()) {
            let mut k = 2;
            while !names.insert(format!("{name} ({k})").to_lowercase()) {
                k += 1;
            }
            warnings.push(format!("{kind}: duplicate group name \"{name}\" renamed"));
            name = format!("{name} ({k})");
        }
        themes.push(Theme {
            theme_id: format!("{}-t{:02}", kind.tag(), themes.len() + 1),
            kind,
            name,
            description: text::normalize_ws(&group.description),
            members: members_for(codebook, &ids),
            member_code_ids: ids,
            part_index: None,
            part_count: None,
        });
    }
    if themes.is_empty() {
        return Err(GatewayError::malformed("no group has a valid topic"));
    }
    if themes.len() != requested_count {
        let msg = format!("{kind}: requested {requested_count} themes, received {}", themes.len());
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(ParsedThemes {
        set: ThemeSet {
            kind,
            themes,
            requested_count,
        },
        warnings,
    })
}

/// The text a theme contributes to a persona prompt. Budget checks and
/// prompt assembly both use this exact string.
pub fn serialize_theme(theme: &Theme) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Theme: {}", theme.name);
    let _ = writeln!(out, "Description: {}", theme.description);
    for m in &theme.members {
        let _ = writeln!(out, "- Code: {}: {}", m.name, text::normalize_ws(&m.description));
        for q in &m.quotes {
            let _ = writeln!(out, "  Quote: \"{}\"", text::normalize_ws(q));
        }
    }
    out
}

fn part(theme: &Theme, index: usize, members: &[ThemeMember]) -> Theme {
    Theme {
        theme_id: format!("{}-p{index}", theme.theme_id),
        kind: theme.kind,
        name: format!("{} (part {index})", theme.name),
        description: theme.description.clone(),
        member_code_ids: members.iter().map(|m| m.code_id.clone()).collect(),
        part_index: Some(index),
        part_count: None,
        members: members.to_vec(),
    }
}

/// Split a theme into consecutive parts whose serialized form each fits
/// `budget` tokens. A theme already within budget comes back unchanged.
pub fn split_oversized(theme: &Theme, budget: usize, estimator: &dyn TokenEstimator) -> Result<Vec<Theme>, ThemeError> {
    if budget == 0 {
        return Err(ThemeError::ZeroBudget);
    }
    if estimator.estimate(&serialize_theme(theme)) <= budget {
        return Ok(vec![theme.clone()]);
    }
    let mut parts: Vec<Theme> = Vec::new();
    let mut current: Vec<ThemeMember> = Vec::new();
    for member in &theme.members {
        let index = parts.len() + 1;
        let mut candidate = current.clone();
        candidate.push(member.clone());
        if estimator.estimate(&serialize_theme(&part(theme, index, &candidate))) <= budget {
            current = candidate;
            continue;
        }
        if !current.is_empty() {
            parts.push(part(theme, index, &current));
        }
        let alone = vec![member.clone()];
        let index = parts.len() + 1;
        let estimate = estimator.estimate(&serialize_theme(&part(theme, index, &alone)));
        if estimate > budget {
            return Err(ThemeError::MemberTooLarge {
                theme_id: theme.theme_id.clone(),
                code_id: member.code_id.clone(),
                estimate,
                budget,
            });
        }
        current = alone;
    }
    if !current.is_empty() {
        let index = parts.len() + 1;
        parts.push(part(theme, index, &current));
    }
    let count = parts.len();
    for p in &mut parts {
        p.part_count = Some(count);
    }
    Ok(parts)
}

/// Apply [`split_oversized`] to every theme of a set.
pub fn split_theme_set(set: &ThemeSet, budget: usize, estimator: &dyn TokenEstimator) -> Result<ThemeSet, ThemeError> {
    let mut themes = Vec::with_capacity(set.themes.len());
    for t in &set.themes {
        themes.extend(split_oversized(t, budget, estimator)?);
    }
    Ok(ThemeSet {
        kind: set.kind,
        themes,
        requested_count: set.requested_count,
    })
}

/// Request and parse one theme set, with one reminder retry on a malformed
/// reply. Returns the parse result and whether the reminder was needed.
pub fn generate_themes(
    codebook: &Codebook,
    n_groups: usize,
    gateway: &Gateway,
) -> Result<(ParsedThemes, bool), ThemeStageError> {
    let prompt = build_grouping_prompt(codebook, n_groups)?;
    let reminder = crate::coding::reminder_line("groups");
    Ok(complete_with_reminder(
        gateway,
        stage::THEMES,
        &prompt,
        &reminder,
        |reply| parse_themes(reply, codebook, n_groups),
    )?)
}

#[derive(Debug, Error)]
pub enum ThemeStageError {
    #[error(transparent)]
    Request(#[from] ThemeError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::{MergeLog, MergedCode, QuoteRef};
    use crate::gateway::HeuristicEstimator;

    pub(crate) fn codebook(kind: CodeKind, n: usize) -> Codebook {
        Codebook {
            kind,
            entries: (0..n)
                .map(|i| MergedCode {
                    code_id: format!("{}-{i:03}", kind.tag()),
                    name: format!("Code {i}"),
                    description: format!("Description of code {i}."),
                    aliases: vec![],
                    quotes: vec![QuoteRef {
                        quote: format!("Quote number {i} from the interview."),
                        interview_id: "iv".into(),
                        chunk_id: "iv-c000".into(),
                    }],
                    member_code_ids: vec![format!("{}-{i:03}", kind.tag())],
                })
                .collect(),
            reduction_report: MergeLog {
                threshold: 0.9,
                decisions: vec![],
            },
        }
    }

    #[test]
    fn prompt_requests_eight_groups() {
        let p = build_grouping_prompt(&codebook(CodeKind::PersonalityTrait, 5), 8).unwrap();
        assert!(p.contains("Create 8 significant groups"));
        assert!(p.contains("topics can also be in more than one group"));
        assert!(p.contains("Display the full list"));
    }

    #[test]
    fn prompt_requests_eleven_groups() {
        let p = build_grouping_prompt(&codebook(CodeKind::Goal, 5), 11).unwrap();
        assert!(p.contains("Create 11 significant groups"));
    }

    #[test]
    fn topic_list_has_one_line_per_entry() {
        let p = build_grouping_prompt(&codebook(CodeKind::Goal, 3), 2).unwrap();
        let list = p.split("List of topics:\n").nth(1).unwrap();
        let lines: Vec<&str> = list.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("1. Code 0"));
        assert!(lines[2].starts_with("3. "));
    }

    #[test]
    fn prompt_preconditions() {
        assert_eq!(
            build_grouping_prompt(&codebook(CodeKind::Goal, 3), 1),
            Err(ThemeError::TooFewGroups(1))
        );
        assert!(build_grouping_prompt(&codebook(CodeKind::Goal, 0), 2).is_err());
    }

    #[test]
    fn eight_groups_over_sixty_five_traits() {
        let cb = codebook(CodeKind::PersonalityTrait, 65);
        let groups: Vec<Value> = (0..8)
            .map(|g| {
                let topics: Vec<usize> = (1..=65).filter(|t| t % 8 == g).collect();
                serde_json::json!({"name": format!("Trait group {g}"), "description": "d", "topics": topics})
            })
            .collect();
        let reply = serde_json::json!({ "groups": groups }).to_string();
        let parsed = parse_themes(&reply, &cb, 8).unwrap();
        assert_eq!(parsed.set.themes.len(), 8);
        assert!(parsed.set.check_integrity(&cb).is_ok());
        assert!(parsed.warnings.is_empty());
    }

    #[test]
    fn shared_topic_lands_in_both_groups() {
        let cb = codebook(CodeKind::Goal, 4);
        let reply = r#"{"groups": [
            {"name": "A", "description": "a", "topics": [1, 2]},
            {"name": "B", "description": "b", "topics": [2, 3, 4]}
        ]}"#;
        let set = parse_themes(reply, &cb, 2).unwrap().set;
        assert!(set.themes[0].member_code_ids.contains(&"goals-001".to_string()));
        assert!(set.themes[1].member_code_ids.contains(&"goals-001".to_string()));
    }

    #[test]
    fn out_of_range_topic_dropped() {
        let cb = codebook(CodeKind::PersonalityTrait, 65);
        let reply = r#"{"groups": [{"name": "A", "description": "a", "topics": [1, 999]},
                                   {"name": "B", "description": "b", "topics": [999]}]}"#;
        let parsed = parse_themes(reply, &cb, 2).unwrap();
        assert_eq!(parsed.set.themes.len(), 1);
        assert_eq!(parsed.set.themes[0].member_code_ids.len(), 1);
        assert!(parsed.warnings.iter().any(|w| w.contains("topic 999")));
        assert!(parsed.warnings.iter().any(|w| w.contains("no valid topics")));
    }

    #[test]
    fn numbered_list_reply() {
        let cb = codebook(CodeKind::Goal, 5);
        let reply = "Here are the groups:\n\n**Group 1: Information access**\nDescription: This group includes topics about access.\nTopics: 1, 3, 5\n\nGroup 2: Regulation - Topics about rules.\nTopics: 2, 4\n";
        let set = parse_themes(reply, &cb, 2).unwrap().set;
        assert_eq!(set.themes.len(), 2);
        assert_eq!(set.themes[0].name, "Information access");
        assert_eq!(set.themes[0].member_code_ids.len(), 3);
        assert_eq!(set.themes[1].description, "Topics about rules.");
    }

    #[test]
    fn unparseable_reply_is_malformed() {
        let cb = codebook(CodeKind::Goal, 5);
        let e = parse_themes("I cannot do that.", &cb, 2).unwrap_err();
        assert_eq!(e.kind, crate::gateway::GatewayErrorKind::MalformedResponse);
    }

    fn theme_with(members: usize, words_per_quote: usize) -> Theme {
        let members: Vec<ThemeMember> = (0..members)
            .map(|i| ThemeMember {
                code_id: format!("c{i}"),
                name: format!("Member {i}"),
                description: "desc".into(),
                quotes: vec!["word ".repeat(words_per_quote).trim().to_string()],
            })
            .collect();
        Theme {
            theme_id: "goals-t01".into(),
            kind: CodeKind::Goal,
            name: "Digital Savvy".into(),
            description: "A theme.".into(),
            member_code_ids: members.iter().map(|m| m.code_id.clone()).collect(),
            part_index: None,
            part_count: None,
            members,
        }
    }

    #[test]
    fn within_budget_is_unchanged() {
        let t = theme_with(3, 5);
        let est = HeuristicEstimator::default();
        assert_eq!(split_oversized(&t, 10_000, &est).unwrap(), vec![t]);
    }

    #[test]
    fn double_budget_splits_in_two() {
        // ten members of about 100 tokens each; the budget holds a bit more
        // than half of the serialized theme
        let t = theme_with(10, 100);
        let est = HeuristicEstimator::default();
        let whole = est.estimate(&serialize_theme(&t));
        let budget = whole / 2 + 40;
        let parts = split_oversized(&t, budget, &est).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].name, "Digital Savvy (part 1)");
        assert_eq!(parts[1].name, "Digital Savvy (part 2)");
        assert_eq!(parts[1].base_name(), "Digital Savvy");
        assert_eq!(parts[0].part_count, Some(2));
        for p in &parts {
            assert!(est.estimate(&serialize_theme(p)) <= budget);
        }
        let rejoined: Vec<String> = parts.iter().flat_map(|p| p.member_code_ids.clone()).collect();
        assert_eq!(rejoined, t.member_code_ids);
    }

    #[test]
    fn oversized_member_named() {
        let t = theme_with(2, 500);
        let est = HeuristicEstimator::default();
        match split_oversized(&t, 100, &est) {
            Err(ThemeError::MemberTooLarge { code_id, .. }) => assert_eq!(code_id, "c0"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn default_counts() {
        let counts: Vec<usize> = CodeKind::ALL.iter().map(|k| default_theme_count(*k)).collect();
        assert_eq!(counts, vec![11, 11, 11, 8]);
    }
}
