//! Fixed reflection-template table: three templates per error modality, each
//! with `[subtask]` and `[object]` slots. The table is version-stamped into
//! every dataset header so downstream consumers can detect drift.

use super::{EcgenError, ErrorModality};

pub const TEMPLATE_VERSION: &str = "v1";

/// Number of templates per modality.
pub const TEMPLATES_PER_MODALITY: usize = 3;

/// Total template count across modalities (the template-id vocabulary).
pub const TEMPLATE_COUNT: usize = TEMPLATES_PER_MODALITY * 3;

const GRIPPER_TEMPLATES: [&str; TEMPLATES_PER_MODALITY] = [
    "When executing [subtask], the gripper should be released when the [object] reaches the appropriate position, instead of continuing to move while holding it.",
    "While performing [subtask], the gripper state change at the [object] was missed, so the grasp or release must be redone at the correct position.",
    "During [subtask], the [object] was not secured because the gripper kept its previous state; return to the [object] and actuate the gripper correctly.",
];

const POSE_TEMPLATES: [&str; TEMPLATES_PER_MODALITY] = [
    "When executing [subtask], the end effector drifted away from the [object]; move back toward the correct position before continuing.",
    "While performing [subtask], the approach missed the [object] by a noticeable offset; realign with the [object] and retry the motion.",
    "During [subtask], the commanded pose deviated from the [object]; retreat slightly and approach the [object] again.",
];

const SEMANTIC_TEMPLATES: [&str; TEMPLATES_PER_MODALITY] = [
    "When executing [subtask], the motion headed toward the wrong object instead of the [object]; redirect to the [object].",
    "While performing [subtask], a distractor was targeted in place of the [object]; move to the true [object] to continue.",
    "During [subtask], the wrong item was selected; the correct target for this step is the [object].",
];

fn table(modality: ErrorModality) -> &'static [&'static str; TEMPLATES_PER_MODALITY] {
    match modality {
        ErrorModality::Gripper => &GRIPPER_TEMPLATES,
        ErrorModality::Pose => &POSE_TEMPLATES,
        ErrorModality::Semantic => &SEMANTIC_TEMPLATES,
    }
}

/// Reflection text produced for one injected error.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionRecord {
    pub template_id: String,
    pub text: String,
    pub error_modality: ErrorModality,
    pub subtask_name: String,
    pub object_name: String,
}

impl ReflectionRecord {
    /// Index of this record's template in the global template vocabulary.
    pub fn template_index(&self) -> u8 {
        let (modality, local) = parse_template_id(&self.template_id)
            .expect("records are constructed with valid template ids");
        global_template_index(modality, local)
    }
}

pub fn template_id(modality: ErrorModality, local_index: usize) -> String {
    format!("{}_{}", modality.as_str(), local_index)
}

pub fn parse_template_id(id: &str) -> Option<(ErrorModality, usize)> {
    let (name, idx) = id.rsplit_once('_')?;
    let modality = ErrorModality::parse(name)?;
    let local: usize = idx.parse().ok()?;
    (local < TEMPLATES_PER_MODALITY).then_some((modality, local))
}

/// Position of (modality, local index) in the flat template vocabulary.
pub fn global_template_index(modality: ErrorModality, local_index: usize) -> u8 {
    (modality.index() * TEMPLATES_PER_MODALITY + local_index) as u8
}

/// Deterministically pick a template for `seed` and substitute the subtask
/// and object names.
pub fn generate_reflection(
    modality: ErrorModality,
    subtask_name: &str,
    object_name: &str,
    seed: u64,
) -> Result<ReflectionRecord, EcgenError> {
    if subtask_name.is_empty() || object_name.is_empty() {
        return Err(EcgenError::InvalidArgument(
            "reflection needs non-empty subtask and object names".into(),
        ));
    }
    let local = (seed % TEMPLATES_PER_MODALITY as u64) as usize;
    let template = table(modality)[local];
    let text = template
        .replace("[subtask]", subtask_name)
        .replace("[object]", object_name);
    Ok(ReflectionRecord {
        template_id: template_id(modality, local),
        text,
        error_modality: modality,
        subtask_name: subtask_name.to_string(),
        object_name: object_name.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gripper_release_template_matches_reference_wording() {
        let rec = generate_reflection(
            ErrorModality::Gripper,
            "place block on goal",
            "block",
            0,
        )
        .unwrap();
        assert_eq!(
            rec.text,
            "When executing place block on goal, the gripper should be released when the block \
             reaches the appropriate position, instead of continuing to move while holding it."
        );
        assert_eq!(rec.template_id, "gripper_0");
    }

    #[test]
    fn reflection_is_deterministic() {
        let a = generate_reflection(ErrorModality::Pose, "pick", "cup", 12).unwrap();
        let b = generate_reflection(ErrorModality::Pose, "pick", "cup", 12).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn seeds_cover_all_templates() {
        for modality in [
            ErrorModality::Gripper,
            ErrorModality::Pose,
            ErrorModality::Semantic,
        ] {
            let ids: std::collections::HashSet<String> = (0..10u64)
                .map(|seed| {
                    generate_reflection(modality, "subtask", "object", seed)
                        .unwrap()
                        .template_id
                })
                .collect();
            assert!(ids.len() >= TEMPLATES_PER_MODALITY);
        }
    }

    #[test]
    fn every_template_substitutes_both_names() {
        for modality in [
            ErrorModality::Gripper,
            ErrorModality::Pose,
            ErrorModality::Semantic,
        ] {
            for seed in 0..TEMPLATES_PER_MODALITY as u64 {
                let rec =
                    generate_reflection(modality, "stack the tower", "green cube", seed).unwrap();
                assert!(rec.text.contains("stack the tower"), "{}", rec.text);
                assert!(rec.text.contains("green cube"), "{}", rec.text);
                assert!(!rec.text.contains("[subtask]"));
                assert!(!rec.text.contains("[object]"));
            }
        }
    }

    #[test]
    fn empty_names_rejected() {
        assert!(generate_reflection(ErrorModality::Gripper, "", "x", 0).is_err());
        assert!(generate_reflection(ErrorModality::Gripper, "x", "", 0).is_err());
    }

    #[test]
    fn template_ids_round_trip() {
        for modality in [
            ErrorModality::Gripper,
            ErrorModality::Pose,
            ErrorModality::Semantic,
        ] {
            for local in 0..TEMPLATES_PER_MODALITY {
                let id = template_id(modality, local);
                assert_eq!(parse_template_id(&id), Some((modality, local)));
            }
        }
        assert_eq!(parse_template_id("gripper_7"), None);
        assert_eq!(parse_template_id("nonsense"), None);
    }
}
