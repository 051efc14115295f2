//! Versioned prompt templates.
//!
//! Templates live as plain text files next to the crate and are compiled in.
//! Their SHA-256 hashes feed the manifest so a template edit invalidates
//! cached stage outputs.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal) => {
        pub const $ident: Template = Template {
            name: $name,
            text: include_str!(concat!("../templates/", $name, ".txt")),
        };
    };
}

template!(JUDGE, "judge");
template!(VERIFIER, "verifier");
template!(VERIFIER_REPROMPT, "verifier_reprompt");
template!(CHECKLIST_DIRECT, "checklist_direct");
template!(CHECKLIST_CANDIDATES, "checklist_candidates");
template!(CHECKLIST_REPROMPT, "checklist_reprompt");
template!(EVAL_NATURALNESS, "eval_naturalness");
template!(EVAL_OBJECTIVENESS, "eval_objectiveness");
template!(EVAL_COMPREHENSIVENESS, "eval_comprehensiveness");
template!(EVAL_ATOMICITY, "eval_atomicity");
template!(EVAL_COMPARE, "eval_compare");

pub const ALL: [Template; 11] = [
    JUDGE,
    VERIFIER,
    VERIFIER_REPROMPT,
    CHECKLIST_DIRECT,
    CHECKLIST_CANDIDATES,
    CHECKLIST_REPROMPT,
    EVAL_NATURALNESS,
    EVAL_OBJECTIVENESS,
    EVAL_COMPREHENSIVENESS,
    EVAL_ATOMICITY,
    EVAL_COMPARE,
];

impl Template {
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }

    /// Substitutes `{key}` placeholders in one pass.
    ///
    /// Substituted values are never rescanned, so braces inside user text are
    /// left alone. Unknown placeholders are kept verbatim.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let text = self.text.trim_end_matches('\n');
        let mut out =
            String::with_capacity(text.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
        let mut rest = text;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let replaced = after.find('}').and_then(|close| {
                let key = &after[..close];
                vars.iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| (*v, close))
            });
            match replaced {
                Some((value, close)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

/// Template name to content hash, for the manifest.
pub fn template_hashes() -> BTreeMap<String, String> {
    ALL.iter().map(|t| (t.name.to_string(), t.hash())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn judge_prompt_has_all_placeholders_and_sentinel_rule() {
        for key in ["{instruction}", "{response}", "{requirement}"] {
            assert!(JUDGE.text.contains(key), "missing {key}");
        }
        assert!(JUDGE.text.contains("return -1 as a default"));
        assert!(JUDGE.text.contains("Return only a number"));
        let rendered = JUDGE.render(&[
            ("instruction", "Translate"),
            ("response", "Hola {requirement}"),
            ("requirement", "Is it Spanish?"),
        ]);
        assert!(rendered.contains("Generated Text:\nHola {requirement}\n"));
        assert!(rendered.ends_with("Question:\nIs it Spanish?\n\nScore:"));
    }

    #[test]
    fn verifier_prompt_carries_deferral_protocol() {
        assert!(VERIFIER.text.contains("defer to human expert ####"));
        assert!(VERIFIER.text.contains("{input}"));
        assert!(VERIFIER.text.contains("{requirement}"));
    }

    #[test]
    fn unknown_placeholders_are_kept() {
        let t = Template {
            name: "t",
            text: "a {x} b {y} {",
        };
        assert_eq!(t.render(&[("x", "1")]), "a 1 b {y} {");
    }

    #[test]
    fn hashes_are_distinct_per_template() {
        let hashes = template_hashes();
        assert_eq!(hashes.len(), ALL.len());
        let distinct: std::collections::BTreeSet<_> = hashes.values().collect();
        assert_eq!(distinct.len(), ALL.len());
    }
}
