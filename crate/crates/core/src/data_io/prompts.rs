use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLACEHOLDER: &str = "CLASSNAME";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptClass {
    pub label: String,
    pub names: Vec<String>,
}

/// Shared templates plus per-class name lists. Construct through
/// [`PromptSet::new`] or [`PromptSet::from_json`] so the invariants hold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    #[serde(default)]
    pub name: Option<String>,
    pub templates: Vec<String>,
    pub classes: Vec<PromptClass>,
}

impl PromptSet {
    pub fn new(templates: Vec<String>, classes: Vec<(String, Vec<String>)>) -> Result<Self> {
        let set = PromptSet {
            name: None,
            templates,
            classes: classes
                .into_iter()
                .map(|(label, names)| PromptClass { label, names })
                .collect(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("prompt set has no templates".into()));
        }
        for t in &self.templates {
            if t.matches(PLACEHOLDER).count() != 1 {
                return Err(Error::Config(format!(
                    "template {t:?} must contain {PLACEHOLDER} exactly once"
                )));
            }
        }
        if self.classes.is_empty() {
            return Err(Error::Config("prompt set has no classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.names.is_empty() {
                return Err(Error::Config(format!("class {:?} has no names", c.label)));
            }
            if self.classes[..i].iter().any(|o| o.label == c.label) {
                return Err(Error::Config(format!(
                    "duplicate class label {:?}",
                    c.label
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let set: PromptSet =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn labels(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.label.as_str()).collect()
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| Error::Lookup(format!("unknown class {label:?}")))
    }

    /// Restricts the set to the named classes, in the given order.
    pub fn subset(&self, labels: &[&str]) -> Result<PromptSet> {
        let classes = labels
            .iter()
            .map(|l| self.class_index(l).map(|i| self.classes[i].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(PromptSet {
            name: self.name.clone(),
            templates: self.templates.clone(),
            classes,
        })
    }
}

pub fn fill_template(template: &str, class_name: &str) -> String {
    template.replacen(PLACEHOLDER, class_name, 1)
}

/// All `template × name` prompts for one class, templates varying fastest
/// within each name.
pub fn expand_prompts(set: &PromptSet, label: &str) -> Result<Vec<String>> {
    let c = &set.classes[set.class_index(label)?];
    Ok(c.names
        .iter()
        .flat_map(|n| set.templates.iter().map(move |t| fill_template(t, n)))
        .collect())
}

pub fn read_prompt_set(path: impl AsRef<Path>) -> Result<PromptSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PromptSet::from_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

const BUILT_IN: &[(&str, &str)] = &[
    ("tcga_brca", include_str!("../../prompts/tcga_brca.json")),
    ("tcga_nsclc", include_str!("../../prompts/tcga_nsclc.json")),
    ("tcga_rcc", include_str!("../../prompts/tcga_rcc.json")),
    ("dhmc_luad", include_str!("../../prompts/dhmc_luad.json")),
    ("crc100k", include_str!("../../prompts/crc100k.json")),
    ("wsss4luad", include_str!("../../prompts/wsss4luad.json")),
    ("sicap", include_str!("../../prompts/sicap.json")),
    (
        "sicap_segmentation",
        include_str!("../../prompts/sicap_segmentation.json"),
    ),
    ("digestpath", include_str!("../../prompts/digestpath.json")),
];

pub fn built_in_names() -> Vec<&'static str> {
    BUILT_IN.iter().map(|(n, _)| *n).collect()
}

pub fn built_in_prompt_set(name: &str) -> Result<PromptSet> {
    let (_, text) = BUILT_IN
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::Lookup(format!("no built-in prompt set {name:?}")))?;
    PromptSet::from_json(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_template_single_name() {
        let s = PromptSet::new(
            vec!["this is CLASSNAME.".into()],
            vec![("a".into(), vec!["fat".into()])],
        )
        .unwrap();
        assert_eq!(expand_prompts(&s, "a").unwrap(), vec!["this is fat."]);
        assert!(matches!(expand_prompts(&s, "b"), Err(Error::Lookup(_))));
    }

    #[test]
    fn brca_idc_has_110_prompts() {
        let s = built_in_prompt_set("tcga_brca").unwrap();
        assert_eq!(s.templates.len(), 22);
        let p = expand_prompts(&s, "IDC").unwrap();
        assert_eq!(p.len(), 110);
        assert_eq!(p[1], "a photomicrograph showing invasive ductal carcinoma.");
    }

    #[test]
    fn all_built_ins_load() {
        let counts = [
            ("tcga_brca", 2),
            ("tcga_nsclc", 2),
            ("tcga_rcc", 3),
            ("dhmc_luad", 5),
            ("crc100k", 9),
            ("wsss4luad", 3),
            ("sicap", 4),
            ("sicap_segmentation", 2),
            ("digestpath", 2),
        ];
        for (name, c) in counts {
            assert_eq!(
                built_in_prompt_set(name).unwrap().num_classes(),
                c,
                "{name}"
            );
        }
        assert!(built_in_prompt_set("nope").is_err());
    }

    #[test]
    fn validation() {
        let bad = |t: &str| PromptSet::new(vec![t.into()], vec![("a".into(), vec!["x".into()])]);
        assert!(matches!(bad("no placeholder"), Err(Error::Config(_))));
        assert!(bad("CLASSNAME and CLASSNAME").is_err());
        assert!(PromptSet::new(vec!["CLASSNAME".into()], vec![("a".into(), vec![])]).is_err());
        let json = r#"{"templates":["CLASSNAME"],"classes":[{"label":"a","names":["x"],"extra":1}],"v":2}"#;
        assert!(PromptSet::from_json(json).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn json_round_trip(
            templates in prop::collection::vec("[a-z ]{0,8}", 1..5),
            classes in prop::collection::vec(prop::collection::vec("[a-zA-Z ,\\-]{1,12}", 1..4), 1..5),
        ) {
            let templates: Vec<String> = templates.into_iter().map(|t| format!("{t}{PLACEHOLDER}.")).collect();
            let classes = classes.into_iter().enumerate().map(|(i, n)| (format!("c{i}"), n)).collect();
            let s = PromptSet::new(templates, classes).unwrap();
            let back = PromptSet::from_json(&s.to_json().unwrap()).unwrap();
            prop_assert_eq!(back, s);
        }
    }
}
