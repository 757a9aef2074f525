//! Prompt rendering over the shot type x prompt length x context level grid.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Codebook, ExemplarPool, RequirementStatement};

const BUILTIN_TEMPLATES: &str = include_str!("../templates/prompts.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no {level} context description in codebook for {test_case}")]
    MissingContext { level: ContextLevel, test_case: String },
    #[error("{shot} prompts need {needed} exemplars, pool has {available}")]
    NotEnoughExemplars {
        shot: ShotType,
        needed: usize,
        available: usize,
    },
    #[error("requirement {requirement_id} belongs to {requirement_case}, codebook is for {codebook_case}")]
    TestCaseMismatch {
        requirement_id: String,
        requirement_case: String,
        codebook_case: String,
    },
    #[error("template file line {line}: {message}")]
    TemplateSyntax { line: usize, message: String },
    #[error("template [{key}]: {message}")]
    InvalidTemplate { key: String, message: String },
    #[error("no template for [{0}]")]
    MissingTemplate(String),
    #[error("unknown {axis} value {value:?}")]
    UnknownFilter { axis: &'static str, value: String },
}

macro_rules! axis_enum {
    ($(#[$meta:meta])* $name:ident, $axis:literal { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = PromptError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($name::$variant),)+
                    _ => Err(PromptError::UnknownFilter { axis: $axis, value: s.to_string() }),
                }
            }
        }
    };
}

axis_enum!(
    /// Number of worked examples in the prompt. Zero-shot is the inductive
    /// setting; one- and few-shot are deductive.
    ShotType, "shot" { Zero => "zero", One => "one", Few => "few" }
);
axis_enum!(PromptLength, "length" { Short => "short", Medium => "medium", Long => "long" });
axis_enum!(ContextLevel, "context" { None => "none", Some => "some", Full => "full" });

impl ShotType {
    pub fn example_count(self) -> usize {
        match self {
            ShotType::Zero => 0,
            ShotType::One => 1,
            ShotType::Few => 3,
        }
    }
}

/// One cell of the prompt matrix. Ordering is shot-major, then length, then
/// context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Condition {
    pub shot: ShotType,
    pub length: PromptLength,
    pub context: ContextLevel,
}

impl Condition {
    pub fn new(shot: ShotType, length: PromptLength, context: ContextLevel) -> Self {
        Self { shot, length, context }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}", self.shot, self.length, self.context)
    }
}

impl FromStr for Condition {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split('/').collect();
        if parts.len() != 3 {
            return Err(PromptError::UnknownFilter {
                axis: "condition",
                value: s.to_string(),
            });
        }
        Ok(Condition::new(parts[0].parse()?, parts[1].parse()?, parts[2].parse()?))
    }
}

/// Optional restriction of each grid axis. `None` keeps every value.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GridFilter {
    pub shots: Option<Vec<ShotType>>,
    pub lengths: Option<Vec<PromptLength>>,
    pub contexts: Option<Vec<ContextLevel>>,
}

impl GridFilter {
    /// Parses textual axis values; an empty slice leaves the axis unfiltered.
    pub fn parse<S: AsRef<str>>(shots: &[S], lengths: &[S], contexts: &[S]) -> Result<Self, PromptError> {
        fn axis<T: FromStr<Err = PromptError>, S: AsRef<str>>(values: &[S]) -> Result<Option<Vec<T>>, PromptError> {
            if values.is_empty() {
                return Ok(None);
            }
            values
                .iter()
                .flat_map(|v| v.as_ref().split(','))
                .filter(|v| !v.trim().is_empty())
                .map(str::parse)
                .collect::<Result<Vec<T>, _>>()
                .map(Some)
        }
        Ok(GridFilter {
            shots: axis(shots)?,
            lengths: axis(lengths)?,
            contexts: axis(contexts)?,
        })
    }
}

/// Cross product of the three axes in grid order, restricted by `filter`.
pub fn condition_grid(filter: &GridFilter) -> Vec<Condition> {
    fn keep<T: PartialEq>(allowed: &Option<Vec<T>>, value: &T) -> bool {
        allowed.as_ref().is_none_or(|a| a.contains(value))
    }
    let mut grid = Vec::new();
    for shot in ShotType::ALL {
        for length in PromptLength::ALL {
            for context in ContextLevel::ALL {
                if keep(&filter.shots, shot) && keep(&filter.lengths, length) && keep(&filter.contexts, context) {
                    grid.push(Condition::new(*shot, *length, *context));
                }
            }
        }
    }
    grid
}

/// Context text for a level: empty for `none`, otherwise the codebook's brief
/// or full system description.
pub fn context_text(level: ContextLevel, codebook: &Codebook) -> Result<String, PromptError> {
    let text = match level {
        ContextLevel::None => return Ok(String::new()),
        ContextLevel::Some => &codebook.system_description_brief,
        ContextLevel::Full => &codebook.system_description_full,
    };
    let text = text.trim();
    if text.is_empty() {
        return Err(PromptError::MissingContext {
            level,
            test_case: codebook.test_case.clone(),
        });
    }
    Ok(text.to_string())
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Placeholder {
    Requirement,
    SystemType,
    Context,
    Example(usize),
    Label(usize),
}

impl Placeholder {
    fn parse(name: &str) -> Option<Self> {
        let indexed = |prefix: &str| {
            name.strip_prefix(prefix)
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| *n >= 1)
        };
        match name {
            "requirement" => Some(Placeholder::Requirement),
            "system_type" => Some(Placeholder::SystemType),
            "context" => Some(Placeholder::Context),
            _ => indexed("example")
                .map(Placeholder::Example)
                .or_else(|| indexed("label").map(Placeholder::Label)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Placeholder),
}

/// A parsed template block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    source: String,
    segments: Vec<Segment>,
}

impl Template {
    fn parse(key: &str, source: &str) -> Result<Self, PromptError> {
        let invalid = |message: String| PromptError::InvalidTemplate {
            key: key.to_string(),
            message,
        };
        let mut segments = Vec::new();
        let mut rest = source;
        while let Some(open) = rest.find('{') {
            let close = rest[open..]
                .find('}')
                .map(|c| open + c)
                .ok_or_else(|| invalid("unterminated placeholder".into()))?;
            let name = &rest[open + 1..close];
            let slot = Placeholder::parse(name).ok_or_else(|| invalid(format!("unknown placeholder {{{name}}}")))?;
            if open > 0 {
                segments.push(Segment::Literal(rest[..open].to_string()));
            }
            segments.push(Segment::Slot(slot));
            rest = &rest[close + 1..];
        }
        if !rest.is_empty() {
            segments.push(Segment::Literal(rest.to_string()));
        }
        Ok(Template {
            source: source.to_string(),
            segments,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    fn slots(&self) -> impl Iterator<Item = &Placeholder> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Slot(p) => Some(p),
            Segment::Literal(_) => None,
        })
    }

    fn has_context(&self) -> bool {
        self.slots().any(|p| *p == Placeholder::Context)
    }

    fn example_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .slots()
            .filter_map(|p| match p {
                Placeholder::Example(i) | Placeholder::Label(i) => Some(*i),
                _ => None,
            })
            .collect();
        idx.sort_unstable();
        idx.dedup();
        idx
    }
}

/// The versioned set of prompt templates, keyed by `shot.length`.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    source: String,
    blocks: BTreeMap<String, Template>,
    unlabeled_examples: bool,
}

impl PromptTemplates {
    /// Templates shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(BUILTIN_TEMPLATES).expect("built-in templates are valid")
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let source = std::fs::read_to_string(path).map_err(|e| PromptError::TemplateSyntax {
            line: 0,
            message: format!("{}: {e}", path.display()),
        })?;
        Self::parse(&source)
    }

    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut raw: Vec<(String, usize, Vec<&str>)> = Vec::new();
        for (i, line) in source.lines().enumerate() {
            let trimmed = line.trim_end();
            if trimmed.starts_with('#') {
                continue;
            }
            if let Some(key) = trimmed.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                raw.push((key.trim().to_string(), i + 1, Vec::new()));
            } else if let Some((_, _, body)) = raw.last_mut() {
                body.push(trimmed);
            } else if !trimmed.is_empty() {
                return Err(PromptError::TemplateSyntax {
                    line: i + 1,
                    message: "text outside of a template block".into(),
                });
            }
        }

        let mut blocks = BTreeMap::new();
        for (key, line, body) in raw {
            let text = body.join("\n").trim().to_string();
            let mut parts = key.split('.');
            let shot: ShotType = parts.next().unwrap_or("").parse().map_err(|_| PromptError::TemplateSyntax {
                line,
                message: format!("bad block key [{key}]"),
            })?;
            let _length: PromptLength =
                parts.next().unwrap_or("").parse().map_err(|_| PromptError::TemplateSyntax {
                    line,
                    message: format!("bad block key [{key}]"),
                })?;
            let template = Template::parse(&key, &text)?;
            let requirement_slots = template.slots().filter(|p| **p == Placeholder::Requirement).count();
            if requirement_slots != 1 {
                return Err(PromptError::InvalidTemplate {
                    key,
                    message: format!("expected exactly one {{requirement}}, found {requirement_slots}"),
                });
            }
            let expected: Vec<usize> = (1..=shot.example_count()).collect();
            if template.example_indices() != expected {
                return Err(PromptError::InvalidTemplate {
                    key,
                    message: format!("{shot}-shot template must use examples 1..={}", shot.example_count()),
                });
            }
            if blocks.insert(key.clone(), template).is_some() {
                return Err(PromptError::TemplateSyntax {
                    line,
                    message: format!("duplicate block [{key}]"),
                });
            }
        }
        for shot in ShotType::ALL {
            for length in PromptLength::ALL {
                let key = format!("{shot}.{length}");
                if !blocks.contains_key(&key) {
                    return Err(PromptError::MissingTemplate(key));
                }
            }
        }
        Ok(PromptTemplates {
            source: source.to_string(),
            blocks,
            unlabeled_examples: false,
        })
    }

    /// Selects the `.unlabeled` example-list variants where they exist.
    pub fn with_unlabeled_examples(mut self, on: bool) -> Self {
        self.unlabeled_examples = on;
        self
    }

    pub fn template(&self, shot: ShotType, length: PromptLength) -> &Template {
        let key = format!("{shot}.{length}");
        if self.unlabeled_examples {
            if let Some(t) = self.blocks.get(&format!("{key}.unlabeled")) {
                return t;
            }
        }
        &self.blocks[&key]
    }

    pub fn content_hash(&self) -> String {
        let variant = if self.unlabeled_examples { "unlabeled" } else { "labeled" };
        crate::sha256_hex(format!("{variant}\n{}", self.source).as_bytes())
    }
}

/// A fully substituted prompt together with its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub condition: Condition,
    pub test_case: String,
    pub requirement_id: String,
    pub exemplar_ids: Vec<String>,
}

/// Appends `piece` after collapsing the whitespace run where an empty context
/// was removed: a run containing a newline becomes one newline, any other run
/// a single space, and nothing at the very start.
fn join_collapsed(out: &mut String, piece: &str) {
    let kept = out.trim_end().len();
    let mut newline = out[kept..].contains('\n');
    out.truncate(kept);
    let rest = piece.trim_start();
    newline |= piece[..piece.len() - rest.len()].contains('\n');
    if !out.is_empty() && !rest.is_empty() {
        out.push(if newline { '\n' } else { ' ' });
    }
    out.push_str(rest);
}

pub fn render_prompt(
    templates: &PromptTemplates,
    condition: Condition,
    requirement: &RequirementStatement,
    codebook: &Codebook,
    exemplars: &ExemplarPool,
) -> Result<RenderedPrompt, PromptError> {
    if requirement.test_case != codebook.test_case {
        return Err(PromptError::TestCaseMismatch {
            requirement_id: requirement.id.clone(),
            requirement_case: requirement.test_case.clone(),
            codebook_case: codebook.test_case.clone(),
        });
    }
    let needed = condition.shot.example_count();
    if exemplars.len() < needed {
        return Err(PromptError::NotEnoughExemplars {
            shot: condition.shot,
            needed,
            available: exemplars.len(),
        });
    }
    let used = &exemplars.exemplars[..needed];
    let context = context_text(condition.context, codebook)?;
    let template = templates.template(condition.shot, condition.length);

    let mut out = String::new();
    if !template.has_context() && !context.is_empty() {
        out.push_str(&context);
        out.push('\n');
    }
    let mut collapse_next = false;
    let mut segments = template.segments.iter().peekable();
    while let Some(segment) = segments.next() {
        match segment {
            Segment::Literal(text) => {
                if collapse_next {
                    let text = text.strip_prefix('.').unwrap_or(text);
                    join_collapsed(&mut out, text);
                    collapse_next = false;
                } else {
                    out.push_str(text);
                }
            }
            Segment::Slot(slot) => match slot {
                Placeholder::Requirement => out.push_str(&requirement.text),
                Placeholder::SystemType => out.push_str(&codebook.system_type),
                Placeholder::Example(i) => out.push_str(&used[i - 1].text),
                Placeholder::Label(i) => out.push_str(&used[i - 1].label),
                Placeholder::Context if context.is_empty() => {
                    collapse_next = true;
                    if segments.peek().is_none() {
                        join_collapsed(&mut out, "");
                    }
                }
                Placeholder::Context => {
                    let followed_by_period =
                        matches!(segments.peek(), Some(Segment::Literal(t)) if t.starts_with('.'));
                    match context.strip_suffix('.') {
                        Some(stem) if followed_by_period => out.push_str(stem),
                        _ => out.push_str(&context),
                    }
                }
            },
        }
    }

    Ok(RenderedPrompt {
        text: out,
        condition,
        test_case: requirement.test_case.clone(),
        requirement_id: requirement.id.clone(),
        exemplar_ids: used.iter().map(|e| e.requirement_id.clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Exemplar;

    fn codebook() -> Codebook {
        Codebook {
            test_case: "library".into(),
            system_type: "Library Management".into(),
            labels: vec!["Catalog".into(), "Loan".into(), "Notification".into()],
            synonyms: Default::default(),
            system_description_brief:
                "This is a Library Management System that handles cataloging, user management, and loans.".into(),
            system_description_full: "The Library Management System (LMS) manages all aspects of a modern library, including resource cataloging, loan processing, digital resource management, and administrative reporting.".into(),
        }
    }

    fn requirement() -> RequirementStatement {
        RequirementStatement {
            id: "lib:4".into(),
            text: "The system shall send overdue reminders by email.".into(),
            test_case: "library".into(),
            source_doc: "lib".into(),
        }
    }

    fn pool() -> ExemplarPool {
        let ex = |id: &str, text: &str, label: &str| Exemplar {
            requirement_id: id.into(),
            text: text.into(),
            label: label.into(),
        };
        ExemplarPool {
            exemplars: vec![
                ex("lib:1", "The system shall record book loans.", "Loan"),
                ex("lib:2", "The system shall index new titles.", "Catalog"),
                ex("lib:3", "The system shall alert members.", "Notification"),
            ],
            seed: 0,
        }
    }

    fn render(shot: ShotType, length: PromptLength, context: ContextLevel) -> RenderedPrompt {
        render_prompt(
            &PromptTemplates::builtin(),
            Condition::new(shot, length, context),
            &requirement(),
            &codebook(),
            &pool(),
        )
        .unwrap()
    }

    #[test]
    fn zero_short_none_is_the_bare_template() {
        let p = render(ShotType::Zero, PromptLength::Short, ContextLevel::None);
        assert_eq!(
            p.text,
            "Analyze this The system shall send overdue reminders by email. and respond with ONLY a single Qualitative Data Analysis-based label."
        );
        assert!(p.exemplar_ids.is_empty());
    }

    #[test]
    fn context_levels() {
        let cb = codebook();
        assert_eq!(context_text(ContextLevel::None, &cb).unwrap(), "");
        assert!(context_text(ContextLevel::Some, &cb)
            .unwrap()
            .starts_with("This is a Library Management System that handles cataloging"));
        assert!(context_text(ContextLevel::Full, &cb)
            .unwrap()
            .contains("manages all aspects of a modern library"));
        let mut empty = cb.clone();
        empty.system_description_full = String::new();
        assert_eq!(
            context_text(ContextLevel::Full, &empty),
            Err(PromptError::MissingContext {
                level: ContextLevel::Full,
                test_case: "library".into()
            })
        );
    }

    #[test]
    fn missing_context_fails_render() {
        let mut cb = codebook();
        cb.system_description_full = "  ".into();
        let err = render_prompt(
            &PromptTemplates::builtin(),
            Condition::new(ShotType::Few, PromptLength::Long, ContextLevel::Full),
            &requirement(),
            &cb,
            &pool(),
        )
        .unwrap_err();
        assert!(matches!(err, PromptError::MissingContext { .. }));
    }

    #[test]
    fn few_long_full_has_three_labelled_examples() {
        let p = render(ShotType::Few, PromptLength::Long, ContextLevel::Full);
        for k in 1..=3 {
            assert!(p.text.contains(&format!("Example {k}: ")));
        }
        assert!(p.text.contains("Example 1: The system shall record book loans. (Label: Loan)"));
        assert_eq!(p.text.matches("Label:").count(), 3);
        assert!(p.text.contains("\nThe Library Management System (LMS) manages all aspects"));
        assert_eq!(p.exemplar_ids, ["lib:1", "lib:2", "lib:3"]);
    }

    #[test]
    fn long_without_context_collapses_whitespace() {
        let zero = render(ShotType::Zero, PromptLength::Long, ContextLevel::None);
        assert!(zero
            .text
            .starts_with("You are performing Qualitative Data Analysis on requirements for a Library Management system.\nAnalyze the requirement below"));
        let few = render(ShotType::Few, PromptLength::Long, ContextLevel::None);
        assert!(few.text.contains("system.\nGiven the following examples:"));
        // the context period is not doubled
        let some = render(ShotType::Zero, PromptLength::Long, ContextLevel::Some);
        assert!(some.text.contains("and loans. Analyze the requirement below"));
    }

    #[test]
    fn context_is_prepended_when_template_has_no_slot() {
        let p = render(ShotType::Zero, PromptLength::Short, ContextLevel::Some);
        assert!(p
            .text
            .starts_with("This is a Library Management System that handles cataloging, user management, and loans.\nAnalyze this "));
    }

    #[test]
    fn one_shot_uses_a_single_example() {
        for length in PromptLength::ALL {
            let p = render(ShotType::One, *length, ContextLevel::Full);
            assert_eq!(p.text.matches("Label:").count(), 1, "{length}");
            assert_eq!(p.exemplar_ids, ["lib:1"]);
        }
    }

    #[test]
    fn unlabeled_variant_drops_labels_for_short_and_medium() {
        let templates = PromptTemplates::builtin().with_unlabeled_examples(true);
        let p = render_prompt(
            &templates,
            Condition::new(ShotType::Few, PromptLength::Medium, ContextLevel::None),
            &requirement(),
            &codebook(),
            &pool(),
        )
        .unwrap();
        assert_eq!(p.text.matches("Label:").count(), 0);
        assert!(p.text.contains(
            "Examples: The system shall record book loans., The system shall index new titles., The system shall alert members.."
        ));
        assert_ne!(templates.content_hash(), PromptTemplates::builtin().content_hash());
    }

    #[test]
    fn render_errors() {
        let mut small = pool();
        small.exemplars.truncate(1);
        let err = render_prompt(
            &PromptTemplates::builtin(),
            Condition::new(ShotType::Few, PromptLength::Short, ContextLevel::None),
            &requirement(),
            &codebook(),
            &small,
        )
        .unwrap_err();
        assert_eq!(
            err,
            PromptError::NotEnoughExemplars {
                shot: ShotType::Few,
                needed: 3,
                available: 1
            }
        );
        let mut other = requirement();
        other.test_case = "smart_home".into();
        assert!(matches!(
            render_prompt(
                &PromptTemplates::builtin(),
                Condition::new(ShotType::Zero, PromptLength::Short, ContextLevel::None),
                &other,
                &codebook(),
                &pool()
            ),
            Err(PromptError::TestCaseMismatch { .. })
        ));
    }

    #[test]
    fn braces_in_values_are_not_reinterpreted() {
        let mut r = requirement();
        r.text = "The system shall show {context} literally.".into();
        let p = render_prompt(
            &PromptTemplates::builtin(),
            Condition::new(ShotType::Zero, PromptLength::Long, ContextLevel::Full),
            &r,
            &codebook(),
            &pool(),
        )
        .unwrap();
        assert_eq!(p.text.matches("{context}").count(), 1);
    }

    #[test]
    fn grid_order_and_filters() {
        let all = condition_grid(&GridFilter::default());
        assert_eq!(all.len(), 27);
        assert_eq!(all[0], Condition::new(ShotType::Zero, PromptLength::Short, ContextLevel::None));
        assert_eq!(all[1], Condition::new(ShotType::Zero, PromptLength::Short, ContextLevel::Some));
        assert_eq!(all[3], Condition::new(ShotType::Zero, PromptLength::Medium, ContextLevel::None));
        assert!(all.windows(2).all(|w| w[0] < w[1]));

        let few = GridFilter::parse(&["few"], &[], &[]).unwrap();
        assert_eq!(condition_grid(&few).len(), 9);
        let one = GridFilter::parse(&["zero"], &["long"], &["full"]).unwrap();
        assert_eq!(
            condition_grid(&one),
            [Condition::new(ShotType::Zero, PromptLength::Long, ContextLevel::Full)]
        );
        let listed = GridFilter::parse(&["few"], &[], &["full,none"]).unwrap();
        assert_eq!(condition_grid(&listed).len(), 6);
        assert_eq!(
            GridFilter::parse(&["many"], &[], &[]),
            Err(PromptError::UnknownFilter {
                axis: "shot",
                value: "many".into()
            })
        );
    }

    #[test]
    fn condition_text_round_trip() {
        for c in condition_grid(&GridFilter::default()) {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
    }

    #[test]
    fn template_file_validation() {
        let missing = "[zero.short]\nAnalyze {requirement}.\n";
        assert!(matches!(PromptTemplates::parse(missing), Err(PromptError::MissingTemplate(_))));
        let unknown = "[zero.short]\nAnalyze {requirment}.\n";
        assert!(matches!(PromptTemplates::parse(unknown), Err(PromptError::InvalidTemplate { .. })));
        let wrong_examples = BUILTIN_TEMPLATES.replace(
            "Examples: {example1} (Label: {label1}), {example2} (Label: {label2}), {example3} (Label: {label3}).",
            "Examples: {example1} (Label: {label1}).",
        );
        assert!(matches!(
            PromptTemplates::parse(&wrong_examples),
            Err(PromptError::InvalidTemplate { .. })
        ));
        assert!(matches!(
            PromptTemplates::parse("stray\n[zero.short]\n{requirement}"),
            Err(PromptError::TemplateSyntax { line: 1, .. })
        ));
    }

    #[test]
    fn every_cell_satisfies_prompt_invariants() {
        for c in condition_grid(&GridFilter::default()) {
            let p = render(c.shot, c.length, c.context);
            assert_eq!(p.text.matches(&requirement().text).count(), 1, "{c}");
            assert!(!p.text.contains('{'), "{c}: {}", p.text);
            assert_eq!(p.exemplar_ids.len(), c.shot.example_count());
            match c.shot {
                ShotType::Zero => assert!(!p.text.contains("Example"), "{c}"),
                ShotType::One => assert_eq!(p.text.matches("Label:").count(), 1),
                ShotType::Few => assert_eq!(p.text.matches("Label:").count(), 3),
            }
            assert_eq!(p, render(c.shot, c.length, c.context));
        }
    }
}
