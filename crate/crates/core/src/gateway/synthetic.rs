//! A rule-based [`Responder`] that answers the three pipeline prompts
//! offline. Replies are derived only from the prompt and the seed, so a run
//! against it is reproducible. Coding quotes are verbatim sentences from the
//! prompt text; persona goal quotes are copied from the goals list.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::json;

use super::mock::Responder;
use super::stage;
use crate::text;

#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticResponder;

const STOPWORDS: &[&str] = &[
    "about",
    "after",
    "again",
    "also",
    "always",
    "because",
    "been",
    "before",
    "being",
    "could",
    "does",
    "doing",
    "down",
    "each",
    "even",
    "every",
    "from",
    "have",
    "having",
    "here",
    "into",
    "just",
    "know",
    "like",
    "made",
    "make",
    "many",
    "more",
    "most",
    "much",
    "need",
    "only",
    "other",
    "over",
    "really",
    "same",
    "should",
    "some",
    "such",
    "than",
    "that",
    "their",
    "them",
    "then",
    "there",
    "these",
    "they",
    "thing",
    "things",
    "think",
    "this",
    "those",
    "through",
    "very",
    "want",
    "well",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "with",
    "would",
    "your",
    "yes",
    "yeah",
    "actually",
    "sometimes",
    "usually",
    "someone",
    "something",
    "maybe",
];

const PEOPLE: &[(&str, &str, &str)] = &[
    ("Sofia", "Weber", "Germany"),
    ("Lukas", "Novak", "Czech Republic"),
    ("Chiara", "Bianchi", "Italy"),
    ("Mateo", "Fernandez", "Spain"),
    ("Ines", "Carvalho", "Portugal"),
    ("Pieter", "de Vries", "Netherlands"),
    ("Aoife", "Byrne", "Ireland"),
    ("Elin", "Lindqvist", "Sweden"),
    ("Tomasz", "Kowalski", "Poland"),
    ("Camille", "Dubois", "France"),
    ("Nikos", "Papadopoulos", "Greece"),
    ("Hanna", "Virtanen", "Finland"),
];

fn content_words(s: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in text::match_tokens(s) {
        if w.len() >= 4
            && w.chars().all(|c| c.is_ascii_alphabetic())
            && !STOPWORDS.contains(&w.as_str())
            && !out.contains(&w)
        {
            out.push(w);
        }
    }
    out
}

fn sentences(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = s.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            out.push(text::normalize_ws(&current));
            current.clear();
        }
    }
    if !current.trim().is_empty() {
        out.push(text::normalize_ws(&current));
    }
    out
}

/// Longest word prefix of `s` that wraps to at most four 80-column lines.
fn fit_quote(s: &str) -> String {
    let words: Vec<&str> = s.split_whitespace().collect();
    let mut n = words.len();
    while n > 1 && text::wrapped_line_count(&words[..n].join(" "), 80) > 4 {
        n -= 1;
    }
    words[..n].join(" ")
}

fn capture<'a>(pattern: &str, haystack: &'a str) -> Option<&'a str> {
    Regex::new(pattern)
        .expect("static regex")
        .captures(haystack)
        .and_then(|c| c.get(1))
        .map(|m| m.as_str())
}

fn respond_code(prompt: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let key = capture(r"keep them together in '([^']+)'", prompt)?;
    let max: usize = capture(r"Identify up to (\d+)", prompt)?.parse().ok()?;
    let end = prompt.rfind("```")?;
    let start = prompt[..end].rfind("```")? + 3;
    let body = &prompt[start..end];

    let mut candidates: Vec<String> = sentences(body)
        .into_iter()
        .filter(|s| text::word_count(s) >= 6 && content_words(s).len() >= 2)
        .collect();
    candidates.shuffle(rng);
    let prefix = match key {
        "behaviours" => "Relies on",
        "frustrations" => "Frustrated by",
        "goals" => "Aims for",
        "traits" => "Values",
        _ => "About",
    };
    let entries: Vec<_> = candidates
        .iter()
        .take(max)
        .map(|s| {
            let quote = fit_quote(s);
            let mut words = content_words(&quote);
            let b = words[words.len().min(3) - 1].clone();
            words.sort_by_key(|w| std::cmp::Reverse(w.len()));
            let a = &words[0];
            json!({
                "name": format!("{prefix} {a}"),
                "description": format!("The respondent links {a} with {b} when describing their work."),
                "quote": quote,
            })
        })
        .collect();
    Some(json!({ key: entries }).to_string())
}

fn respond_themes(prompt: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let groups_wanted: usize = capture(r"Create (\d+) significant groups", prompt)?.parse().ok()?;
    let list = prompt.split("List of topics:").nth(1)?;
    let topic = Regex::new(r"^(\d+)\. ([^:]+):").expect("static regex");
    let topics: Vec<(usize, String)> = list
        .lines()
        .filter_map(|l| {
            let c = topic.captures(l)?;
            Some((c[1].parse().ok()?, c[2].trim().to_string()))
        })
        .collect();
    if topics.is_empty() || groups_wanted == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..topics.len()).collect();
    order.shuffle(rng);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); groups_wanted];
    for (i, t) in order.iter().enumerate() {
        members[i % groups_wanted].push(*t);
    }
    for (g, m) in members.iter_mut().enumerate() {
        if m.is_empty() {
            m.push(order[g % order.len()]);
        }
        if topics.len() > groups_wanted && rng.gen_bool(0.5) {
            let extra = order[rng.gen_range(0..order.len())];
            if !m.contains(&extra) {
                m.push(extra);
            }
        }
    }
    let groups: Vec<_> = members
        .iter()
        .map(|m| {
            let lead = &topics[m[0]].1;
            json!({
                "name": lead,
                "description": format!("Topics gathered around {}.", lead.to_lowercase()),
                "topics": m.iter().map(|t| topics[*t].0).collect::<Vec<_>>(),
            })
        })
        .collect();
    Some(json!({ "groups": groups }).to_string())
}

struct ListContent {
    themes: Vec<String>,
    codes: Vec<String>,
    quotes: Vec<String>,
}

fn list_section(prompt: &str, label: &str, next: Option<&str>) -> ListContent {
    let after = prompt.split(label).nth(1).unwrap_or("");
    let body = match next {
        Some(n) => after.split(n).next().unwrap_or(after),
        None => after,
    };
    let mut content = ListContent {
        themes: Vec::new(),
        codes: Vec::new(),
        quotes: Vec::new(),
    };
    for line in body.lines().map(str::trim) {
        if let Some(t) = line.strip_prefix("Theme: ") {
            content.themes.push(t.to_string());
        } else if let Some(c) = line.strip_prefix("- Code: ") {
            content.codes.push(c.split(": ").next().unwrap_or(c).to_string());
        } else if let Some(q) = line.strip_prefix("Quote: ") {
            content.quotes.push(q.trim_matches('"').to_string());
        }
    }
    content
}

fn pick_items(content: &ListContent, n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut pool: Vec<String> = content.codes.clone();
    pool.dedup();
    pool.shuffle(rng);
    pool.extend(content.themes.iter().cloned());
    pool.truncate(n);
    pool
}

fn respond_persona(prompt: &str, rng: &mut ChaCha8Rng) -> Option<String> {
    let frustrations = list_section(prompt, "List of frustrations:", Some("List of goals:"));
    let goals = list_section(prompt, "List of goals:", Some("List of behaviours:"));
    let behaviours = list_section(prompt, "List of behaviours:", Some("List of personality traits:"));
    let traits = list_section(prompt, "List of personality traits:", None);
    let quote = goals.quotes.choose(rng)?.clone();
    let &(first, last, country) = PEOPLE.choose(rng)?;
    let age = ["Young", "Middle", "Old"][rng.gen_range(0..3)];
    let goal_theme = goals.themes.first()?.to_lowercase();
    let frustration_theme = frustrations.themes.first()?.to_lowercase();

    let additional_goals = pick_items(&goals, 2, rng);
    let additional_frustrations = pick_items(&frustrations, 2, rng);
    let behaviour_items = pick_items(&behaviours, 3, rng);
    let trait_items = pick_items(&traits, 3, rng);
    let bullets = |items: &[String]| items.iter().map(|i| format!("- {i}\n")).collect::<String>();

    Some(format!(
        "**Name and surname:** {first} {last}  \n**Country:** {country}  \n**Age:** {age} age\n\n\
         **Goal & Frustration:** {first}'s main goal is progress on what the goals list calls {goal_theme}. The main frustration concerns {frustration_theme}.\n\n\
         **Quote:** \"{quote}\"\n\n\
         **Narrative:** {first} {last} runs a farm in {country}. Day to day, {first} {behaviour}. \
         Asked about the future, {first} keeps returning to {goal_theme} and to {second_goal}. \
         Progress is slowed by {frustration_theme}.\n\n\
         ### **Additional goals:**\n\n{}\n\
         ### **Additional frustrations:**\n\n{}\n\
         ### **Behaviour:**\n\n{}\n\
         ### **Personality:**\n\n{}",
        bullets(&additional_goals),
        bullets(&additional_frustrations),
        bullets(&behaviour_items),
        bullets(&trait_items),
        behaviour = behaviours.themes.first().map(|t| t.to_lowercase()).unwrap_or_default(),
        second_goal = goals.themes.get(1).map(|t| t.to_lowercase()).unwrap_or_default(),
    ))
}

impl Responder for SyntheticResponder {
    fn respond(&self, stage_tag: &str, prompt: &str, seed: u64) -> Option<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match stage_tag {
            stage::CODE => respond_code(prompt, &mut rng),
            stage::THEMES => respond_themes(prompt, &mut rng),
            stage::PERSONAS => respond_persona(prompt, &mut rng),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotes_are_verbatim_sentences() {
        let prompt = "Identify up to 2 relevant goals ... keep them together in 'goals'.\n\n```We keep sheep on the hill farm. Prices for wool have dropped badly this year. I check the forecast every morning before feeding.```";
        let reply = SyntheticResponder.respond(stage::CODE, prompt, 3).unwrap();
        let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
        let entries = v["goals"].as_array().unwrap();
        assert_eq!(entries.len(), 2);
        for e in entries {
            assert!(prompt.contains(e["quote"].as_str().unwrap()));
        }
    }

    #[test]
    fn theme_reply_has_requested_groups() {
        let prompt = "Create 3 significant groups\n\nList of topics:\n1. A: a\n2. B: b\n3. C: c\n4. D: d\n5. E: e";
        let reply = SyntheticResponder.respond(stage::THEMES, prompt, 9).unwrap();
        let v: serde_json::Value = serde_json::from_str(&reply).unwrap();
        assert_eq!(v["groups"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn unknown_stage_declines() {
        assert!(SyntheticResponder.respond("other", "x", 0).is_none());
    }

    #[test]
    fn same_seed_same_reply() {
        let prompt = "Create 2 significant groups\n\nList of topics:\n1. A: a\n2. B: b\n3. C: c";
        assert_eq!(
            SyntheticResponder.respond(stage::THEMES, prompt, 5),
            SyntheticResponder.respond(stage::THEMES, prompt, 5)
        );
    }
}
