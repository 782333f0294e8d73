//! Versioned prompt templates sent to the understanding model.
//!
//! The ids double as the `template_id` field of understand requests, which
//! is how the simulated backend knows which task it is answering.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub id: &'static str,
    pub body: &'static str,
}

pub const POLICY_GENERATION: Template = Template {
    id: "policy.generation.v1",
    body: include_str!("../templates/policy_generation_v1.txt"),
};

pub const POLICY_EDITING: Template = Template {
    id: "policy.editing.v1",
    body: include_str!("../templates/policy_editing_v1.txt"),
};

pub const ENHANCE: Template = Template {
    id: "enhance.v1",
    body: include_str!("../templates/enhance_v1.txt"),
};

pub const REVISE: Template = Template {
    id: "revise.v1",
    body: include_str!("../templates/revise_v1.txt"),
};

pub const REFINE: Template = Template {
    id: "refine.v1",
    body: include_str!("../templates/refine_v1.txt"),
};

pub const JUDGE: Template = Template {
    id: "judge.v1",
    body: include_str!("../templates/judge_v1.txt"),
};

pub const ALL: [Template; 6] = [POLICY_GENERATION, POLICY_EDITING, ENHANCE, REVISE, REFINE, JUDGE];

impl Template {
    /// Substitutes `{{name}}` placeholders in a single pass, so values that
    /// themselves contain braces are never re-expanded. Unknown placeholders
    /// are left as written.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.body.len() + 256);
        let mut rest = self.body;
        while let Some(open) = rest.find("{{") {
            out.push_str(&rest[..open]);
            let after = &rest[open + 2..];
            match after.find("}}") {
                Some(close) => {
                    let key = &after[..close];
                    match vars.iter().find(|(k, _)| *k == key) {
                        Some((_, v)) => out.push_str(v),
                        None => {
                            out.push_str("{{");
                            out.push_str(key);
                            out.push_str("}}");
                        }
                    }
                    rest = &after[close + 2..];
                }
                None => {
                    out.push_str(&rest[open..]);
                    rest = "";
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Collapses line breaks so a value cannot spill into the next labelled line.
pub fn one_line(s: &str) -> String {
    s.split(['\n', '\r']).map(str::trim).filter(|l| !l.is_empty()).collect::<Vec<_>>().join(" ")
}

/// Truncates to at most `max` characters on a char boundary, marking the cut.
pub fn clip(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        return s.to_string();
    }
    let mut out: String = s.chars().take(max.saturating_sub(3)).collect();
    out.push_str("...");
    out
}
