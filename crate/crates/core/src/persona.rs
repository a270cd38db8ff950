//! Persona generation: draw two themes per kind, check the combined prompt
//! against the context window, ask the model for a persona and parse the
//! reply into a structured record.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coding::{complete_with_reminder, parallel_map, CodeKind};
use crate::gateway::{stage, Gateway, GatewayError, ModelProfile, TokenEstimator};
use crate::text;
use crate::themes::{serialize_theme, Theme, ThemeSet};

pub const PICKS_PER_KIND: usize = 2;
pub const DEFAULT_MAX_DRAWS: usize = 25;
pub const NARRATIVE_WORD_LIMIT: usize = 250;
pub const ITEM_WORD_LIMIT: usize = 20;
/// Slack allowed over the prompted word limits before a flag is raised.
pub const WORD_LIMIT_TOLERANCE: f64 = 0.2;
pub const QUOTE_MATCH_THRESHOLD: f64 = 0.8;

/// Order of the four lists inside the persona prompt.
pub const PROMPT_KIND_ORDER: [CodeKind; 4] = [
    CodeKind::Frustration,
    CodeKind::Goal,
    CodeKind::Behaviour,
    CodeKind::PersonalityTrait,
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PersonaError {
    #[error("cannot pick {picks} from a set of {size}")]
    SetTooSmall { size: usize, picks: usize },
    #[error("combination count does not fit in 128 bits")]
    CountOverflow,
    #[error("{kind} has {available} themes; at least {PICKS_PER_KIND} are needed")]
    TooFewThemes { kind: CodeKind, available: usize },
    #[error("no theme set for {0}")]
    MissingKind(CodeKind),
    #[error("selection references unknown theme {0}")]
    UnknownTheme(String),
    #[error(
        "no selection fit the context window after {attempts} draws; smallest estimate {smallest_estimate} tokens + {reserve} reserved exceeds {limit}"
    )]
    DrawsExhausted {
        attempts: usize,
        smallest_estimate: usize,
        limit: usize,
        reserve: usize,
    },
    #[error("persona request failed: {0}")]
    Gateway(#[from] GatewayError),
}

/// Binomial coefficient, exact.
pub fn binomial(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is always divisible by (i + 1)
        acc = acc.checked_mul(u128::from(n - i))? / u128::from(i + 1);
    }
    Some(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinationCounts {
    /// Product over sets of `C(size, picks)`.
    pub constrained: u128,
    /// `C(sum of sizes, picks * number of sets)`, ignoring the per-set rule.
    pub unconstrained: u128,
}

pub fn count_combinations(set_sizes: &[usize], picks_per_set: usize) -> Result<CombinationCounts, PersonaError> {
    let mut constrained: u128 = 1;
    for &size in set_sizes {
        if size < picks_per_set {
            return Err(PersonaError::SetTooSmall {
                size,
                picks: picks_per_set,
            });
        }
        let c = binomial(size as u64, picks_per_set as u64).ok_or(PersonaError::CountOverflow)?;
        constrained = constrained.checked_mul(c).ok_or(PersonaError::CountOverflow)?;
    }
    let total: u64 = set_sizes.iter().map(|&s| s as u64).sum();
    let unconstrained = binomial(total, (picks_per_set * set_sizes.len()) as u64).ok_or(PersonaError::CountOverflow)?;
    Ok(CombinationCounts {
        constrained,
        unconstrained,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeSelection {
    pub selection_id: String,
    pub rng_seed: u64,
    pub picks: BTreeMap<CodeKind, (String, String)>,
    pub estimated_prompt_tokens: usize,
}

const PROMPT_HEADER: &str = "Using the lists provided below, write a user persona

The persona should be structured as follows:

Name and surname (realistic also based on the country)

Country: name of the country of the Persona (which must be European)

Age: Based on the lists tell if the persona is young, middle or old age

\"Goal & Frustration\": tell what the persona main goal (max 1) is and what is the persona main frustration, include a quote taken from the quotes in the goal list representing the main goal

\"Narrative\": include also a narrative background of the persona (max 250 words)

\"Additional goals\": identify with bullet points 2 additional goals (max 20 words each) and two additional frustrations (max 20 words each) of the persona.

\"Behaviour\": identify the personas key behaviours (max 3, 20 words each),

\"Personality\": identify the main persona personality traits (max 3, 20 words each).
";

const PERSONA_REMINDER: &str = "Use exactly the headings Name and surname, Country, Age, Goal & Frustration, Quote, Narrative, Additional goals, Additional frustrations, Behaviour and Personality.";

fn list_label(kind: CodeKind) -> &'static str {
    match kind {
        CodeKind::Frustration => "List of frustrations:",
        CodeKind::Goal => "List of goals:",
        CodeKind::Behaviour => "List of behaviours:",
        CodeKind::PersonalityTrait => "List of personality traits:",
    }
}

enum Part<'a> {
    Fixed(String),
    Theme(&'a str),
}

/// The prompt as alternating fixed text and theme payloads. Theme payloads
/// are given in [`PROMPT_KIND_ORDER`], two per kind.
fn prompt_parts<'a>(payloads: &[[&'a str; 2]; 4]) -> Vec<Part<'a>> {
    let mut parts = Vec::with_capacity(13);
    for (i, kind) in PROMPT_KIND_ORDER.iter().enumerate() {
        let lead = if i == 0 { PROMPT_HEADER } else { "" };
        parts.push(Part::Fixed(format!("{lead}\n{}\n", list_label(*kind))));
        parts.push(Part::Theme(payloads[i][0]));
        parts.push(Part::Fixed("\n".into()));
        parts.push(Part::Theme(payloads[i][1]));
    }
    parts
}

fn join_parts(parts: &[Part<'_>]) -> String {
    parts
        .iter()
        .map(|p| match p {
            Part::Fixed(s) => s.as_str(),
            Part::Theme(s) => s,
        })
        .collect()
}

/// Sum of the estimates of the fixed prompt text. Because estimates are
/// subadditive, this plus the eight theme estimates bounds the estimate of
/// the assembled prompt.
pub fn persona_prompt_overhead(estimator: &dyn TokenEstimator) -> usize {
    prompt_parts(&[[""; 2]; 4])
        .iter()
        .map(|p| match p {
            Part::Fixed(s) => estimator.estimate(s),
            Part::Theme(_) => 0,
        })
        .sum()
}

/// Largest per-theme estimate that keeps any eight-theme persona prompt
/// within the profile's prompt capacity.
pub fn theme_budget(profile: &ModelProfile, estimator: &dyn TokenEstimator) -> usize {
    profile
        .context_limit
        .saturating_sub(profile.response_reserve + persona_prompt_overhead(estimator))
        / (PICKS_PER_KIND * PROMPT_KIND_ORDER.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precheck {
    Accept(usize),
    Reject(usize),
}

impl Precheck {
    pub fn is_accept(self) -> bool {
        matches!(self, Precheck::Accept(_))
    }

    pub fn estimate(self) -> usize {
        match self {
            Precheck::Accept(e) | Precheck::Reject(e) => e,
        }
    }
}

pub fn precheck_budget(payload: &str, profile: &ModelProfile, estimator: &dyn TokenEstimator) -> Precheck {
    let estimate = estimator.estimate(payload);
    if estimate + profile.response_reserve <= profile.context_limit {
        Precheck::Accept(estimate)
    } else {
        Precheck::Reject(estimate)
    }
}

fn find_theme<'a>(sets: &'a BTreeMap<CodeKind, ThemeSet>, kind: CodeKind, id: &str) -> Result<&'a Theme, PersonaError> {
    sets.get(&kind)
        .ok_or(PersonaError::MissingKind(kind))?
        .theme(id)
        .ok_or_else(|| PersonaError::UnknownTheme(id.to_string()))
}

fn picked_payloads(
    picks: &BTreeMap<CodeKind, (String, String)>,
    sets: &BTreeMap<CodeKind, ThemeSet>,
) -> Result<[[String; 2]; 4], PersonaError> {
    let mut out: [[String; 2]; 4] = Default::default();
    for (i, kind) in PROMPT_KIND_ORDER.iter().enumerate() {
        let (a, b) = picks.get(kind).ok_or(PersonaError::MissingKind(*kind))?;
        out[i] = [
            serialize_theme(find_theme(sets, *kind, a)?),
            serialize_theme(find_theme(sets, *kind, b)?),
        ];
    }
    Ok(out)
}

fn assemble(payloads: &[[String; 2]; 4]) -> String {
    let refs: [[&str; 2]; 4] = std::array::from_fn(|i| [payloads[i][0].as_str(), payloads[i][1].as_str()]);
    join_parts(&prompt_parts(&refs))
}

pub fn build_persona_prompt(
    selection: &ThemeSelection,
    theme_sets: &BTreeMap<CodeKind, ThemeSet>,
) -> Result<String, PersonaError> {
    Ok(assemble(&picked_payloads(&selection.picks, theme_sets)?))
}

/// Draw two distinct themes per kind, re-drawing while the assembled prompt
/// would not fit. The stream is seeded once, so re-draws are deterministic.
pub fn sample_selection(
    theme_sets: &BTreeMap<CodeKind, ThemeSet>,
    rng_seed: u64,
    profile: &ModelProfile,
    estimator: &dyn TokenEstimator,
    max_draws: usize,
) -> Result<ThemeSelection, PersonaError> {
    for kind in CodeKind::ALL {
        let set = theme_sets.get(&kind).ok_or(PersonaError::MissingKind(kind))?;
        if set.themes.len() < PICKS_PER_KIND {
            return Err(PersonaError::TooFewThemes {
                kind,
                available: set.themes.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut smallest = usize::MAX;
    for attempt in 0..max_draws.max(1) {
        let picks: BTreeMap<CodeKind, (String, String)> = CodeKind::ALL
            .iter()
            .map(|kind| {
                let themes = &theme_sets[kind].themes;
                let mut drawn = index::sample(&mut rng, themes.len(), PICKS_PER_KIND).into_vec();
                drawn.sort_unstable();
                (
                    *kind,
                    (themes[drawn[0]].theme_id.clone(), themes[drawn[1]].theme_id.clone()),
                )
            })
            .collect();
        let prompt = assemble(&picked_payloads(&picks, theme_sets)?);
        match precheck_budget(&prompt, profile, estimator) {
            Precheck::Accept(estimate) => {
                return Ok(ThemeSelection {
                    selection_id: format!("sel-{rng_seed:016x}-{attempt:02}"),
                    rng_seed,
                    picks,
                    estimated_prompt_tokens: estimate,
                })
            }
            Precheck::Reject(estimate) => {
                tracing::debug!(attempt, estimate, "selection over budget, drawing again");
                smallest = smallest.min(estimate);
            }
        }
    }
    Err(PersonaError::DrawsExhausted {
        attempts: max_draws.max(1),
        smallest_estimate: smallest,
        limit: profile.context_limit,
        reserve: profile.response_reserve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgeBand {
    Young,
    Middle,
    Old,
}

impl AgeBand {
    pub fn from_text(s: &str) -> Option<Self> {
        let lower = s.to_lowercase();
        if lower.contains("middle") {
            Some(Self::Middle)
        } else if lower.contains("young") {
            Some(Self::Young)
        } else if ["old", "elder", "senior"].iter().any(|w| lower.contains(w)) {
            Some(Self::Old)
        } else {
            None
        }
    }

    fn label(self) -> &'static str {
        match self {
            Self::Young => "Young",
            Self::Middle => "Middle",
            Self::Old => "Old",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    pub name: String,
    pub country: String,
    pub age_band: AgeBand,
    pub main_goal: String,
    pub main_frustration: String,
    pub goal_quote: String,
    pub narrative: String,
    pub additional_goals: Vec<String>,
    pub additional_frustrations: Vec<String>,
    pub behaviours: Vec<String>,
    pub traits: Vec<String>,
    /// Id of the [`ThemeSelection`] the persona was built from.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedPersona {
    pub persona: Persona,
    /// Advisory findings: word limits, item counts, country, missing quote.
    pub flags: Vec<String>,
}

const EUROPEAN_COUNTRIES: &[&str] = &[
    "albania",
    "andorra",
    "austria",
    "belarus",
    "belgium",
    "bosnia and herzegovina",
    "bulgaria",
    "croatia",
    "cyprus",
    "czech republic",
    "czechia",
    "denmark",
    "england",
    "estonia",
    "finland",
    "france",
    "germany",
    "greece",
    "hungary",
    "iceland",
    "ireland",
    "italy",
    "kosovo",
    "latvia",
    "liechtenstein",
    "lithuania",
    "luxembourg",
    "malta",
    "moldova",
    "monaco",
    "montenegro",
    "netherlands",
    "the netherlands",
    "north macedonia",
    "northern ireland",
    "norway",
    "poland",
    "portugal",
    "romania",
    "san marino",
    "scotland",
    "serbia",
    "slovakia",
    "slovenia",
    "spain",
    "sweden",
    "switzerland",
    "ukraine",
    "united kingdom",
    "uk",
    "wales",
];

pub fn is_european(country: &str) -> bool {
    let c = text::normalize_ws(country).to_lowercase();
    let c = c.trim_end_matches('.');
    EUROPEAN_COUNTRIES.contains(&c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Section {
    Name,
    Country,
    Age,
    GoalFrustration,
    Quote,
    Narrative,
    AdditionalGoals,
    AdditionalFrustrations,
    Behaviour,
    Personality,
}

fn section_for(label: &str) -> Option<Section> {
    let l = text::normalize_ws(&label.replace('&', " and ")).to_lowercase();
    Some(match l.trim_matches(|c| c == '"' || c == '\'' || c == ' ') {
        "name and surname" | "name" | "full name" | "name and last name" => Section::Name,
        "country" => Section::Country,
        "age" | "age band" => Section::Age,
        "goal and frustration" | "goals and frustrations" | "goal and frustrations" | "main goal and frustration" => {
            Section::GoalFrustration
        }
        "quote" | "goal quote" => Section::Quote,
        "narrative" | "narrative background" | "background" => Section::Narrative,
        "additional goals" => Section::AdditionalGoals,
        "additional frustrations" => Section::AdditionalFrustrations,
        "behaviour" | "behaviours" | "behavior" | "behaviors" | "key behaviours" | "key behaviors" => {
            Section::Behaviour
        }
        "personality" | "personality traits" | "traits" => Section::Personality,
        _ => return None,
    })
}

/// Reduce HTML and Markdown emphasis to plain lines.
fn flatten_markup(input: &str) -> String {
    let item = Regex::new(r"(?i)<li[^>]*>").expect("static regex");
    let block = Regex::new(r"(?i)</?(?:p|br|ul|ol|div|b|strong|h\d)\b[^>]*>|</li>").expect("static regex");
    let any = Regex::new(r"<[^>]+>").expect("static regex");
    let s = item.replace_all(input, "\n- ");
    let s = block.replace_all(&s, "\n");
    let s = any.replace_all(&s, "");
    s.replace("&amp;", "&")
        .replace("&quot;", "\"")
        .replace("&#39;", "'")
        .replace("&nbsp;", " ")
        .replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("**", "")
        .replace("__", "")
}

fn split_sections(body: &str) -> BTreeMap<Section, Vec<String>> {
    let label = Regex::new(r#"^\s*(?:#{1,6}\s*)?(?P<label>"?[A-Za-z][A-Za-z &']*?"?)\s*:\s*(?P<rest>.*)$"#)
        .expect("static regex");
    let placeholder = Regex::new(r"^\[[A-Z ]+\]$").expect("static regex");
    let mut sections: BTreeMap<Section, Vec<String>> = BTreeMap::new();
    let mut current: Option<Section> = None;
    for line in body.lines() {
        let trimmed = line.trim();
        if placeholder.is_match(trimmed) {
            continue;
        }
        let bare = trimmed.trim_start_matches('#').trim();
        let heading = label
            .captures(trimmed)
            .and_then(|c| section_for(&c["label"]).map(|s| (s, c["rest"].trim().to_string())))
            .or_else(|| section_for(bare.trim_end_matches(':')).map(|s| (s, String::new())));
        if let Some((section, rest)) = heading {
            let lines = sections.entry(section).or_default();
            lines.clear();
            if !rest.is_empty() {
                lines.push(rest);
            }
            current = Some(section);
        } else if let Some(section) = current {
            if !trimmed.is_empty() {
                sections.entry(section).or_default().push(trimmed.to_string());
            }
        }
    }
    sections
}

fn bullet_items(lines: &[String]) -> Vec<String> {
    let bullet = Regex::new(r"^(?:(?:[-*•–]|\d+[.)])\s+)+(?P<item>.*)$").expect("static regex");
    let mut items: Vec<String> = Vec::new();
    for line in lines {
        match bullet.captures(line) {
            Some(c) => items.push(c["item"].to_string()),
            None => match items.last_mut() {
                Some(last) if lines.iter().any(|l| bullet.is_match(l)) => {
                    last.push(' ');
                    last.push_str(line);
                }
                _ => items.push(line.clone()),
            },
        }
    }
    items
        .into_iter()
        .map(|i| text::normalize_ws(&i))
        .filter(|i| !i.is_empty())
        .collect()
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

fn strip_quote_marks(s: &str) -> String {
    s.trim()
        .trim_matches(|c| matches!(c, '"' | '“' | '”' | '‘' | '’'))
        .trim()
        .to_string()
}

fn goal_and_frustration(lines: &[String], flags: &mut Vec<String>) -> (String, String) {
    let labelled = |prefix: &str| {
        lines.iter().find_map(|l| {
            let head = l.get(..prefix.len())?;
            head.eq_ignore_ascii_case(prefix)
                .then(|| text::normalize_ws(&l[prefix.len()..]))
        })
    };
    if let (Some(g), Some(f)) = (labelled("main goal:"), labelled("main frustration:")) {
        return (g, f);
    }
    let (frustration, goal): (Vec<String>, Vec<String>) = sentences(&lines.join(" "))
        .into_iter()
        .partition(|s| s.to_lowercase().contains("frustrat"));
    if frustration.is_empty() {
        flags.push("main frustration not stated".into());
    }
    (goal.join(" "), frustration.join(" "))
}

fn quoted_span(s: &str) -> Option<String> {
    let re = Regex::new(r#""([^"]+)"|“([^”]+)”"#).expect("static regex");
    re.captures(s)
        .and_then(|c| c.get(1).or_else(|| c.get(2)))
        .map(|m| m.as_str().trim().to_string())
}

fn word_limit(limit: usize) -> usize {
    (limit as f64 * (1.0 + WORD_LIMIT_TOLERANCE)).floor() as usize
}

/// Parse a persona document. Headings may be Markdown, HTML or plain, with
/// or without emphasis. Missing required sections are a malformed reply;
/// limit violations only produce flags.
pub fn parse_persona(response_text: &str, selection_id: &str) -> Result<ParsedPersona, GatewayError> {
    let sections = split_sections(&flatten_markup(response_text));
    let missing: Vec<&str> = [
        (Section::Name, "name"),
        (Section::Country, "country"),
        (Section::Age, "age"),
        (Section::GoalFrustration, "goal & frustration"),
        (Section::Narrative, "narrative"),
        (Section::AdditionalGoals, "additional goals"),
        (Section::Behaviour, "behaviour"),
        (Section::Personality, "personality"),
    ]
    .iter()
    .filter(|(s, _)| !sections.contains_key(s))
    .map(|(_, n)| *n)
    .collect();
    if !missing.is_empty() {
        return Err(GatewayError::malformed(format!(
            "persona is missing section(s): {}",
            missing.join(", ")
        )));
    }
    let first_line = |s: Section| sections[&s].first().map(|l| text::normalize_ws(l)).unwrap_or_default();
    let joined = |s: Section| text::normalize_ws(&sections.get(&s).map(|l| l.join(" ")).unwrap_or_default());
    let mut flags = Vec::new();

    let name = first_line(Section::Name);
    let country = first_line(Section::Country);
    if name.is_empty() || country.is_empty() {
        return Err(GatewayError::malformed("persona name or country is empty"));
    }
    let age_text = first_line(Section::Age);
    let age_band = AgeBand::from_text(&age_text)
        .ok_or_else(|| GatewayError::malformed(format!("age \"{age_text}\" is not young, middle or old")))?;

    let (main_goal, main_frustration) = goal_and_frustration(&sections[&Section::GoalFrustration], &mut flags);
    let goal_quote = match sections.get(&Section::Quote) {
        Some(_) => strip_quote_marks(&joined(Section::Quote)),
        None => quoted_span(&joined(Section::GoalFrustration)).unwrap_or_default(),
    };
    if goal_quote.is_empty() {
        flags.push("no goal quote".into());
    }
    let narrative = joined(Section::Narrative);

    let mut additional_goals = bullet_items(&sections[&Section::AdditionalGoals]);
    let additional_frustrations = match sections.get(&Section::AdditionalFrustrations) {
        Some(lines) => bullet_items(lines),
        None => {
            let (f, g): (Vec<String>, Vec<String>) = additional_goals
                .iter()
                .cloned()
                .partition(|i| i.to_lowercase().contains("frustrat") || i.to_lowercase().contains("lack"));
            additional_goals = g;
            f
        }
    };
    let behaviours = bullet_items(&sections[&Section::Behaviour]);
    let traits = bullet_items(&sections[&Section::Personality]);

    let n = text::word_count(&narrative);
    if n > word_limit(NARRATIVE_WORD_LIMIT) {
        flags.push(format!("narrative over limit ({n} words)"));
    }
    for (label, items, expected) in [
        ("additional goals", &additional_goals, 2),
        ("additional frustrations", &additional_frustrations, 2),
        ("behaviours", &behaviours, 3),
        ("traits", &traits, 3),
    ] {
        if (expected == 2 && items.len() != 2) || items.len() > expected {
            flags.push(format!("{label}: {} items, expected {expected}", items.len()));
        }
        for item in items {
            let w = text::word_count(item);
            if w > word_limit(ITEM_WORD_LIMIT) {
                flags.push(format!("{label} item over limit ({w} words)"));
            }
        }
    }
    if !is_european(&country) {
        flags.push(format!("country \"{country}\" is not European"));
    }

    Ok(ParsedPersona {
        persona: Persona {
            name,
            country,
            age_band,
            main_goal,
            main_frustration,
            goal_quote,
            narrative,
            additional_goals,
            additional_frustrations,
            behaviours,
            traits,
            provenance: selection_id.to_string(),
        },
        flags,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteCheck {
    pub matched: bool,
    pub similarity: f64,
    pub closest_quote: Option<String>,
}

/// Fuzzy-match the persona's goal quote against every quote in the two goal
/// themes of its selection.
pub fn validate_quote_provenance(
    persona: &Persona,
    selection: &ThemeSelection,
    theme_sets: &BTreeMap<CodeKind, ThemeSet>,
) -> Result<QuoteCheck, PersonaError> {
    let (a, b) = selection
        .picks
        .get(&CodeKind::Goal)
        .ok_or(PersonaError::MissingKind(CodeKind::Goal))?;
    let mut best = QuoteCheck {
        matched: false,
        similarity: 0.0,
        closest_quote: None,
    };
    for id in [a, b] {
        for quote in find_theme(theme_sets, CodeKind::Goal, id)?.quotes() {
            let s = text::fuzzy_containment(quote, &persona.goal_quote);
            if s > best.similarity {
                best.similarity = s;
                best.closest_quote = Some(quote.to_string());
            }
        }
    }
    best.matched = best.similarity >= QUOTE_MATCH_THRESHOLD;
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RenderFormat {
    StructuredDocument,
    PlainText,
}

fn bullets(out: &mut String, items: &[String]) {
    for i in items {
        let _ = writeln!(out, "- {i}");
    }
}

pub fn render_persona(persona: &Persona, format: RenderFormat) -> String {
    let p = persona;
    let mut out = String::new();
    match format {
        RenderFormat::StructuredDocument => {
            let _ = writeln!(out, "**Name and surname:** {}", p.name);
            let _ = writeln!(out, "**Country:** {}", p.country);
            let _ = writeln!(out, "**Age:** {} age", p.age_band.label());
            let _ = writeln!(out, "\n**Goal & Frustration:**");
            let _ = writeln!(out, "Main goal: {}", p.main_goal);
            let _ = writeln!(out, "Main frustration: {}", p.main_frustration);
            let _ = writeln!(out, "\n**Quote:** \"{}\"", p.goal_quote);
            let _ = writeln!(out, "\n**Narrative:** {}", p.narrative);
            for (heading, items) in [
                ("Additional goals", &p.additional_goals),
                ("Additional frustrations", &p.additional_frustrations),
                ("Behaviour", &p.behaviours),
                ("Personality", &p.traits),
            ] {
                let _ = writeln!(out, "\n### **{heading}:**\n");
                bullets(&mut out, items);
            }
        }
        RenderFormat::PlainText => {
            let _ = writeln!(out, "Name: {}", p.name);
            let _ = writeln!(out, "Country: {}", p.country);
            let _ = writeln!(out, "Age: {}", p.age_band.label());
            let _ = writeln!(out, "\nGoal & Frustration\n{} {}", p.main_goal, p.main_frustration);
            let _ = writeln!(out, "Quote: \"{}\"", p.goal_quote);
            let _ = writeln!(out, "\nNarrative\n{}", p.narrative);
            for (heading, items) in [
                ("Additional goals", &p.additional_goals),
                ("Additional frustrations", &p.additional_frustrations),
                ("Behaviour", &p.behaviours),
                ("Personality", &p.traits),
            ] {
                let _ = writeln!(out, "\n{heading}");
                bullets(&mut out, items);
            }
        }
    }
    out
}

/// The eight themes behind a persona, one row per kind.
pub fn render_provenance(
    selection: &ThemeSelection,
    theme_sets: &BTreeMap<CodeKind, ThemeSet>,
) -> Result<String, PersonaError> {
    let mut out = format!("Themes used ({})\n", selection.selection_id);
    for (kind, label) in [
        (CodeKind::Goal, "Goals"),
        (CodeKind::Frustration, "Frustrations"),
        (CodeKind::Behaviour, "Behaviour"),
        (CodeKind::PersonalityTrait, "Personality"),
    ] {
        let (a, b) = selection.picks.get(&kind).ok_or(PersonaError::MissingKind(kind))?;
        let _ = writeln!(
            out,
            "{label}\t{}\t{}",
            find_theme(theme_sets, kind, a)?.name,
            find_theme(theme_sets, kind, b)?.name
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaArtifact {
    pub persona_id: String,
    pub selection: ThemeSelection,
    pub persona: Persona,
    pub flags: Vec<String>,
    pub quote_check: QuoteCheck,
    pub reminder_used: bool,
}

/// Sample, prompt, parse and validate one persona.
pub fn generate_persona(
    persona_id: &str,
    theme_sets: &BTreeMap<CodeKind, ThemeSet>,
    rng_seed: u64,
    gateway: &Gateway,
    max_draws: usize,
) -> Result<PersonaArtifact, PersonaError> {
    let selection = sample_selection(theme_sets, rng_seed, gateway.profile(), gateway.estimator(), max_draws)?;
    let prompt = build_persona_prompt(&selection, theme_sets)?;
    let (parsed, reminder_used) = complete_with_reminder(gateway, stage::PERSONAS, &prompt, PERSONA_REMINDER, |t| {
        parse_persona(t, &selection.selection_id)
    })?;
    let quote_check = validate_quote_provenance(&parsed.persona, &selection, theme_sets)?;
    Ok(PersonaArtifact {
        persona_id: persona_id.to_string(),
        selection,
        persona: parsed.persona,
        flags: parsed.flags,
        quote_check,
        reminder_used,
    })
}

/// One persona per seed, generated concurrently. Ids are `persona-NN` in
/// seed order.
pub fn generate_personas(
    theme_sets: &BTreeMap<CodeKind, ThemeSet>,
    seeds: &[u64],
    gateway: &Gateway,
    max_draws: usize,
    workers: usize,
) -> Vec<Result<PersonaArtifact, PersonaError>> {
    let jobs: Vec<(usize, u64)> = seeds.iter().copied().enumerate().collect();
    parallel_map(&jobs, workers, |(i, seed)| {
        generate_persona(&format!("persona-{:02}", i + 1), theme_sets, *seed, gateway, max_draws)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::HeuristicEstimator;
    use crate::themes::ThemeMember;

    pub(crate) fn sets(sizes: [usize; 4], quote_words: usize) -> BTreeMap<CodeKind, ThemeSet> {
        CodeKind::ALL
            .iter()
            .zip(sizes)
            .map(|(kind, n)| {
                let themes = (0..n)
                    .map(|i| Theme {
                        theme_id: format!("{}-t{:02}", kind.tag(), i + 1),
                        kind: *kind,
                        name: format!("{kind} theme {i}"),
                        description: "d".into(),
                        member_code_ids: vec![format!("{}-c{i}", kind.tag())],
                        part_index: None,
                        part_count: None,
                        members: vec![ThemeMember {
                            code_id: format!("{}-c{i}", kind.tag()),
                            name: "member".into(),
                            description: "desc".into(),
                            quotes: vec![format!("quote {i} {}", "word ".repeat(quote_words).trim())],
                        }],
                    })
                    .collect();
                (
                    *kind,
                    ThemeSet {
                        kind: *kind,
                        themes,
                        requested_count: n,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn paper_counts() {
        let c = count_combinations(&[11, 11, 11, 8], 2).unwrap();
        assert_eq!(c.constrained, 4_658_500);
        assert_eq!(c.unconstrained, 95_548_245);
        assert_eq!(binomial(40, 8), Some(76_904_685));
        assert_eq!(count_combinations(&[2, 2, 2, 2], 2).unwrap().constrained, 1);
        assert_eq!(count_combinations(&[3, 3], 1).unwrap().constrained, 9);
        assert_eq!(
            count_combinations(&[1, 4], 2),
            Err(PersonaError::SetTooSmall { size: 1, picks: 2 })
        );
    }

    #[test]
    fn precheck_arithmetic() {
        let profile = ModelProfile::default();
        let fixed = |n: usize| move |_: &str| n;
        assert_eq!(precheck_budget("x", &profile, &fixed(10_000)), Precheck::Accept(10_000));
        assert_eq!(precheck_budget("x", &profile, &fixed(14_000)), Precheck::Reject(14_000));
        assert_eq!(precheck_budget("x", &profile, &fixed(13_885)), Precheck::Accept(13_885));
    }

    #[test]
    fn forced_selection() {
        let s = sets([2, 2, 2, 2], 3);
        let est = HeuristicEstimator::default();
        for seed in [0, 1, 99] {
            let sel = sample_selection(&s, seed, &ModelProfile::default(), &est, 25).unwrap();
            for kind in CodeKind::ALL {
                let (a, b) = &sel.picks[&kind];
                assert_eq!(a, &format!("{}-t01", kind.tag()));
                assert_eq!(b, &format!("{}-t02", kind.tag()));
            }
        }
    }

    #[test]
    fn seeded_draw_is_stable() {
        let s = sets([11, 11, 11, 8], 3);
        let est = HeuristicEstimator::default();
        let a = sample_selection(&s, 42, &ModelProfile::default(), &est, 25).unwrap();
        let b = sample_selection(&s, 42, &ModelProfile::default(), &est, 25).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.picks.values() {
            assert_ne!(x, y);
        }
    }

    #[test]
    fn too_few_themes() {
        let s = sets([2, 1, 2, 2], 3);
        let e = sample_selection(&s, 0, &ModelProfile::default(), &HeuristicEstimator::default(), 25).unwrap_err();
        assert_eq!(
            e,
            PersonaError::TooFewThemes {
                kind: CodeKind::Frustration,
                available: 1
            }
        );
    }

    #[test]
    fn oversized_selection_exhausts() {
        let s = sets([2, 2, 2, 2], 2000);
        let e = sample_selection(&s, 7, &ModelProfile::default(), &HeuristicEstimator::default(), 25).unwrap_err();
        match e {
            PersonaError::DrawsExhausted {
                attempts,
                smallest_estimate,
                ..
            } => {
                assert_eq!(attempts, 25);
                assert!(smallest_estimate > 16385 - 2500);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn prompt_lists_and_quote_echo() {
        let s = sets([3, 3, 3, 3], 3);
        let est = HeuristicEstimator::default();
        let sel = sample_selection(&s, 3, &ModelProfile::default(), &est, 25).unwrap();
        let prompt = build_persona_prompt(&sel, &s).unwrap();
        assert!(prompt.contains("write a user persona"));
        for kind in PROMPT_KIND_ORDER {
            assert!(prompt.contains(list_label(kind)));
        }
        let goals = prompt
            .split("List of goals:")
            .nth(1)
            .unwrap()
            .split("List of behaviours:")
            .next()
            .unwrap();
        let (g, _) = &sel.picks[&CodeKind::Goal];
        let quote = s[&CodeKind::Goal].theme(g).unwrap().members[0].quotes[0].clone();
        assert!(goals.contains(&quote));
        assert_eq!(est.estimate(&prompt), sel.estimated_prompt_tokens);
    }

    #[test]
    fn overhead_bounds_assembled_prompt() {
        let s = sets([3, 3, 3, 3], 40);
        let est = HeuristicEstimator::default();
        let sel = sample_selection(&s, 11, &ModelProfile::default(), &est, 25).unwrap();
        let payloads = picked_payloads(&sel.picks, &s).unwrap();
        let sum: usize = payloads.iter().flatten().map(|p| est.estimate(p)).sum();
        assert!(sel.estimated_prompt_tokens <= persona_prompt_overhead(&est) + sum);
    }

    fn sample_persona() -> Persona {
        Persona {
            name: "Ana Costa".into(),
            country: "Portugal".into(),
            age_band: AgeBand::Middle,
            main_goal: "Ana's main goal is to keep her orchard profitable.".into(),
            main_frustration: "Her main frustration is unreliable weather data.".into(),
            goal_quote: "I want numbers I can trust.".into(),
            narrative: "Ana runs a family orchard.".into(),
            additional_goals: vec!["Sell directly to shops".into(), "Train her nephew".into()],
            additional_frustrations: vec!["Paperwork".into(), "Slow internet".into()],
            behaviours: vec!["Checks forecasts every morning".into()],
            traits: vec![],
            provenance: "sel-1".into(),
        }
    }

    #[test]
    fn structured_round_trip() {
        let p = sample_persona();
        let doc = render_persona(&p, RenderFormat::StructuredDocument);
        let back = parse_persona(&doc, "sel-1").unwrap();
        assert_eq!(back.persona, p);
    }

    #[test]
    fn plain_text_heading_order() {
        let doc = render_persona(&sample_persona(), RenderFormat::PlainText);
        let order = [
            "Name:",
            "Country:",
            "Age:",
            "Goal & Frustration",
            "Narrative",
            "Additional goals",
            "Behaviour",
            "Personality",
        ];
        let positions: Vec<usize> = order.iter().map(|h| doc.find(h).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn missing_narrative_is_malformed() {
        let doc = render_persona(&sample_persona(), RenderFormat::StructuredDocument).replace("**Narrative:**", "");
        let e = parse_persona(&doc, "s").unwrap_err();
        assert!(e.detail.contains("narrative"));
    }

    #[test]
    fn html_variant_headings() {
        let doc = "<p><b>Name:</b> Mario Rossi</p> <p><b>Country:</b> Italy</p> <p><b>Age:</b> Middle-aged</p> \
                   <p><b>Goal &amp; Frustration:</b> Mario's main goal is to go digital. His main frustration is scattered tools.</p> \
                   <p><b>Quote:</b> \"Digital sources matter.\"</p> <p><b>Narrative:</b> Mario farms.</p> \
                   <p><b>Additional goals:</b></p> <ul> <li>- Use digital tools</li> <li>- Get market feedback</li> </ul> \
                   <p><b>Additional frustrations:</b></p> <ul> <li>- Language barriers</li> <li>- No photos</li> </ul>\n\
                   **Behaviour:**\n\n- Searches online\n\n**Personality:**\n\n- Curiosity: likes learning\n";
        let p = parse_persona(doc, "s").unwrap().persona;
        assert_eq!(p.age_band, AgeBand::Middle);
        assert_eq!(p.additional_goals, vec!["Use digital tools", "Get market feedback"]);
        assert_eq!(p.additional_frustrations.len(), 2);
        assert_eq!(p.traits, vec!["Curiosity: likes learning"]);
        assert_eq!(p.goal_quote, "Digital sources matter.");
    }

    #[test]
    fn non_european_country_warns() {
        let mut p = sample_persona();
        p.country = "Brazil".into();
        let parsed = parse_persona(&render_persona(&p, RenderFormat::StructuredDocument), "s").unwrap();
        assert!(parsed.flags.iter().any(|f| f.contains("not European")));
    }

    #[test]
    fn quote_provenance_checks() {
        let s = sets([2, 2, 2, 2], 5);
        let est = HeuristicEstimator::default();
        let sel = sample_selection(&s, 0, &ModelProfile::default(), &est, 25).unwrap();
        let quote = s[&CodeKind::Goal].themes[0].members[0].quotes[0].clone();
        let mut p = sample_persona();
        p.goal_quote = quote;
        let c = validate_quote_provenance(&p, &sel, &s).unwrap();
        assert!(c.matched);
        assert_eq!(c.similarity, 1.0);
        p.goal_quote = "Nobody ever said anything like this sentence here.".into();
        assert!(!validate_quote_provenance(&p, &sel, &s).unwrap().matched);
    }

    #[test]
    fn age_vocabulary() {
        assert_eq!(AgeBand::from_text("Young age"), Some(AgeBand::Young));
        assert_eq!(AgeBand::from_text("Middle-aged"), Some(AgeBand::Middle));
        assert_eq!(AgeBand::from_text("middle age"), Some(AgeBand::Middle));
        assert_eq!(AgeBand::from_text("Old age"), Some(AgeBand::Old));
        assert_eq!(AgeBand::from_text("42"), None);
    }
}
