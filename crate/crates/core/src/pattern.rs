use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Matches template text either by substring or, when written as `/.../`,
/// by regular expression.
#[derive(Clone, Debug)]
pub enum TemplatePattern {
    Substring(String),
    Regex(Regex),
}

impl TemplatePattern {
    pub fn is_match(&self, template_text: &str) -> bool {
        match self {
            TemplatePattern::Substring(s) => template_text.contains(s.as_str()),
            TemplatePattern::Regex(re) => re.is_match(template_text),
        }
    }
}

impl PartialEq for TemplatePattern {
    fn eq(&self, other: &Self) -> bool {
        self.to_string() == other.to_string()
    }
}

impl FromStr for TemplatePattern {
    type Err = regex::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() >= 2 && s.starts_with('/') && s.ends_with('/') {
            Ok(TemplatePattern::Regex(Regex::new(&s[1..s.len() - 1])?))
        } else {
            Ok(TemplatePattern::Substring(s.to_string()))
        }
    }
}

impl fmt::Display for TemplatePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplatePattern::Substring(s) => f.write_str(s),
            TemplatePattern::Regex(re) => write!(f, "/{}/", re.as_str()),
        }
    }
}

impl Serialize for TemplatePattern {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TemplatePattern {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substring_and_regex() {
        let p: TemplatePattern = "error cqe status".parse().unwrap();
        assert!(p.is_match("ROCE(,hccp_service.bin):error cqe status."));
        let r: TemplatePattern = r"/^training iteration <\*>/".parse().unwrap();
        assert!(r.is_match("training iteration <*> begins"));
        assert!(!r.is_match("a training iteration <*>"));
        assert_eq!(r.to_string(), r"/^training iteration <\*>/");
        assert!("/(/".parse::<TemplatePattern>().is_err());
    }
}
