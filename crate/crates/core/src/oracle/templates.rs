use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Context, Role};
use crate::error::OracleError;

const DEFAULTS: &[(&str, &str)] = &[
    ("init_hypothesis", include_str!("../../templates/init_hypothesis.txt")),
    ("extract_challenges", include_str!("../../templates/extract_challenges.txt")),
    ("generate_hypothesis", include_str!("../../templates/generate_hypothesis.txt")),
    ("score_hypothesis", include_str!("../../templates/score_hypothesis.txt")),
    ("select_hypothesis", include_str!("../../templates/select_hypothesis.txt")),
    ("sketch", include_str!("../../templates/sketch.txt")),
    ("implement", include_str!("../../templates/implement.txt")),
    ("debug_fix", include_str!("../../templates/debug_fix.txt")),
    ("alignment_check", include_str!("../../templates/alignment_check.txt")),
    ("comprehensive_analysis", include_str!("../../templates/comprehensive_analysis.txt")),
    ("judge", include_str!("../../templates/judge.txt")),
    ("budget_decision", include_str!("../../templates/budget_decision.txt")),
    ("embed", include_str!("../../templates/embed.txt")),
];

/// Prompt templates with `{{key}}` placeholders, one per role.
#[derive(Debug, Clone)]
pub struct Templates {
    by_name: HashMap<String, String>,
}

impl Default for Templates {
    fn default() -> Self {
        Self { by_name: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl Templates {
    /// Built-in templates, overridden by any `<role>.txt` found in `dir`.
    pub fn with_overrides(dir: &Path) -> Result<Self, OracleError> {
        let mut t = Self::default();
        for role in super::Role::ALL {
            let path = dir.join(format!("{}.txt", role.template_name()));
            if path.exists() {
                let text = fs::read_to_string(&path)
                    .map_err(|e| OracleError::Template(format!("{}: {e}", path.display())))?;
                t.by_name.insert(role.template_name().to_string(), text);
            }
        }
        Ok(t)
    }

    /// Substitutes context values. Placeholders with no value render empty.
    pub fn render(&self, role: Role, context: &Context) -> Result<String, OracleError> {
        let template = self
            .by_name
            .get(role.template_name())
            .ok_or_else(|| OracleError::Template(format!("no template for {role}")))?;
        let mut out = String::with_capacity(template.len());
        let mut rest = template.as_str();
        while let Some(start) = rest.find("{{") {
            out.push_str(&rest[..start]);
            let after = &rest[start + 2..];
            let end = after
                .find("}}")
                .ok_or_else(|| OracleError::Template(format!("unclosed placeholder in {role} template")))?;
            let key = after[..end].trim();
            if let Some(v) = context.get(key) {
                out.push_str(v);
            }
            rest = &after[end + 2..];
        }
        out.push_str(rest);
        Ok(out)
    }
}
