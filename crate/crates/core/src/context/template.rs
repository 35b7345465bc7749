use std::collections::BTreeSet;
use std::path::Path;

use super::{ContextError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

/// Plain text with `{slot}` placeholders. A brace pair whose content is not
/// a lowercase identifier is kept literally.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: String,
    source: String,
    pieces: Vec<Piece>,
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl Template {
    pub fn parse(name: impl Into<String>, source: impl Into<String>) -> Self {
        let source = source.into();
        let mut pieces = Vec::new();
        let mut text = String::new();
        let mut rest = source.as_str();
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_slot_name(&after[..close]) => {
                    text.push_str(&rest[..open]);
                    if !text.is_empty() {
                        pieces.push(Piece::Text(std::mem::take(&mut text)));
                    }
                    pieces.push(Piece::Slot(after[..close].to_string()));
                    rest = &after[close + 1..];
                }
                _ => {
                    text.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        text.push_str(rest);
        if !text.is_empty() {
            pieces.push(Piece::Text(text));
        }
        Self {
            name: name.into(),
            source,
            pieces,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn slots(&self) -> BTreeSet<&str> {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.as_str()),
                Piece::Text(_) => None,
            })
            .collect()
    }

    /// Substitutes every slot. Values are inserted verbatim and never
    /// rescanned; unused values are ignored.
    pub fn fill(&self, values: &[(&str, &str)]) -> Result<String> {
        let mut out = String::with_capacity(self.source.len());
        for piece in &self.pieces {
            match piece {
                Piece::Text(t) => out.push_str(t),
                Piece::Slot(s) => {
                    let v = values.iter().find(|(k, _)| k == s).ok_or_else(|| ContextError::Template {
                        template: self.name.clone(),
                        message: format!("slot `{{{s}}}` has no value"),
                    })?;
                    out.push_str(v.1);
                }
            }
        }
        Ok(out)
    }

    fn check_slots(&self, allowed: &[&str]) -> Result<()> {
        if let Some(bad) = self.slots().into_iter().find(|s| !allowed.contains(s)) {
            return Err(ContextError::Template {
                template: self.name.clone(),
                message: format!("unknown slot `{{{bad}}}`; allowed: {}", allowed.join(", ")),
            });
        }
        Ok(())
    }
}

macro_rules! template_set {
    ($($field:ident => [$($slot:literal),*];)*) => {
        /// The prompt wordings used for generation, one file per template.
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct PromptTemplateSet {
            $(pub $field: Template,)*
        }

        impl Default for PromptTemplateSet {
            fn default() -> Self {
                Self {
                    $($field: Template::parse(
                        stringify!($field),
                        include_str!(concat!("../../prompts/", stringify!($field), ".txt")).trim_end(),
                    ),)*
                }
            }
        }

        impl PromptTemplateSet {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Defaults overridden by any `<name>.txt` present in `dir`.
            pub fn load_dir(dir: &Path) -> Result<Self> {
                let mut set = Self::default();
                $(
                    let path = dir.join(concat!(stringify!($field), ".txt"));
                    if path.exists() {
                        let text = std::fs::read_to_string(&path).map_err(|source| ContextError::Io {
                            path: path.display().to_string(),
                            source,
                        })?;
                        set.$field = Template::parse(stringify!($field), text.trim_end());
                    }
                )*
                set.validate()?;
                Ok(set)
            }

            pub fn validate(&self) -> Result<()> {
                $(self.$field.check_slots(&[$($slot),*])?;)*
                Ok(())
            }

            pub fn get(&self, name: &str) -> Option<&Template> {
                match name {
                    $(stringify!($field) => Some(&self.$field),)*
                    _ => None,
                }
            }
        }
    };
}

template_set! {
    relevance => ["head", "tail"];
    entity_description => ["entity"];
    relation_summary => ["head", "tail", "d_h", "d_t"];
    relation_summary_fallback => ["head", "tail"];
    entity_summary => ["entity"];
    entity_summary_fallback => ["entity"];
    hint => ["entity", "relation", "query", "triples", "summary"];
    hint_fallback => ["entity", "relation", "query"];
    relation_template => ["relation", "triples"];
}
