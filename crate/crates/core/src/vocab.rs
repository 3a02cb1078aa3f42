use std::collections::HashSet;

use crate::error::{Error, Result};

/// Placeholder that prompt templates substitute the class name into.
pub const PLACEHOLDER: &str = "{}";

/// Default prompt templates for aerial imagery.
pub const DEFAULT_TEMPLATES: &[&str] = &["a satellite photo of a {}.", "an aerial view of the {}."];

/// Ordered class names plus the prompt templates they are rendered into.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    templates: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>, T: Into<String>>(
        names: impl IntoIterator<Item = S>,
        templates: impl IntoIterator<Item = T>,
    ) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let templates: Vec<String> = templates.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::Empty("vocabulary has no classes".into()));
        }
        if templates.is_empty() {
            return Err(Error::Empty("vocabulary has no prompt templates".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate class name {n:?}")));
            }
        }
        for t in &templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Config(format!(
                    "template {t:?} must contain exactly one {PLACEHOLDER}"
                )));
            }
        }
        Ok(ClassVocabulary { names, templates })
    }

    /// Vocabulary using [`DEFAULT_TEMPLATES`].
    pub fn with_default_templates<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::new(names, DEFAULT_TEMPLATES.iter().copied())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    /// The prompt for class `n` under template `p`.
    pub fn prompt(&self, n: usize, p: usize) -> String {
        self.templates[p].replacen(PLACEHOLDER, &self.names[n], 1)
    }

    /// Reorders classes so that new class `i` is old class `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let names: Vec<String> = perm.iter().map(|&i| self.names[i].clone()).collect();
        Self::new(names, self.templates.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_inputs() {
        assert!(ClassVocabulary::new(Vec::<String>::new(), ["{}"]).is_err());
        assert!(ClassVocabulary::new(["a"], Vec::<String>::new()).is_err());
        assert!(ClassVocabulary::new(["a", "a"], ["{}"]).is_err());
        assert!(ClassVocabulary::new(["a"], ["no placeholder"]).is_err());
        assert!(ClassVocabulary::new(["a"], ["{} and {}"]).is_err());
    }

    #[test]
    fn renders_prompts() {
        let v = ClassVocabulary::new(["road", "tree"], ["a photo of a {}."]).unwrap();
        assert_eq!(v.prompt(1, 0), "a photo of a tree.");
        let p = v.permuted(&[1, 0]).unwrap();
        assert_eq!(p.names(), &["tree".to_string(), "road".to_string()]);
    }
}
