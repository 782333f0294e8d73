//! Deterministic simulated model.
//!
//! An "image" is a set of attribute tokens serialized as canonical JSON
//! (`sim-json`). A prompt's keywords are its tokens that belong to the world
//! vocabulary; repeating a keyword emphasizes it. Generation keeps each
//! keyword unless noise drops it, with drop probability
//! `noise_rate ^ mentions`. Editing closes up to `refine_gain` keyword gaps
//! and never loses attributes. The judge scores
//! `|keywords ∩ attributes| / |keywords|` exactly.
//!
//! Every output is a pure function of the call arguments, so the backend is
//! freely shareable across threads and runs replay bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    BackendError, BackendInfo, Capabilities, ImageFormat, ImageRef, ModelBackend, RawImage,
    UnderstandRequest,
};
use crate::policy::ActionKind;
use crate::seed::rng_from;

pub const DEFAULT_VOCABULARY: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "golden", "purple", "cube", "sphere",
    "bread", "moldy", "cat", "dog", "hat", "tree", "house", "river", "mountain", "car", "bicycle",
    "lamp", "book", "cup", "table", "chair", "window", "sunset", "snow", "rain", "night", "forest",
    "beach", "castle", "robot", "flower", "bird", "boat", "bridge", "clock", "wooden", "glass",
    "metallic", "furry", "shiny", "ancient", "tiny", "giant",
];

/// Prefix a scripted controller entry with this to send it verbatim instead
/// of wrapping it in a JSON decision.
pub const RAW_SCRIPT_PREFIX: &str = "raw:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorldConfig {
    pub vocabulary: Vec<String>,
    pub noise_rate: f64,
    pub refine_gain: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scripted_controller: Option<Vec<String>>,
    /// Makes prompt enhancement return its input unchanged.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub echo_enhancement: bool,
    #[serde(default = "default_true")]
    pub supports_edit: bool,
}

fn default_true() -> bool {
    true
}

impl Default for SimWorldConfig {
    fn default() -> Self {
        Self {
            vocabulary: DEFAULT_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            noise_rate: 0.4,
            refine_gain: 1,
            scripted_controller: None,
            echo_enhancement: false,
            supports_edit: true,
        }
    }
}

impl SimWorldConfig {
    pub fn with_noise(mut self, noise_rate: f64) -> Self {
        self.noise_rate = noise_rate;
        self
    }

    pub fn with_script<S: Into<String>>(mut self, script: impl IntoIterator<Item = S>) -> Self {
        self.scripted_controller = Some(script.into_iter().map(Into::into).collect());
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(format!("noise_rate {} outside [0, 1]", self.noise_rate));
        }
        if self.refine_gain < 1 {
            return Err("refine_gain must be at least 1".to_string());
        }
        Ok(())
    }

    fn vocab_set(&self) -> BTreeSet<&str> {
        self.vocabulary.iter().map(String::as_str).collect()
    }

    /// Vocabulary keywords of `text` with their mention counts.
    pub fn keyword_counts(&self, text: &str) -> BTreeMap<String, usize> {
        let vocab = self.vocab_set();
        let mut counts = BTreeMap::new();
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let token = token.to_lowercase();
            if vocab.contains(token.as_str()) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn keywords(&self, text: &str) -> BTreeSet<String> {
        self.keyword_counts(text).into_keys().collect()
    }
}

/// The simulated image payload.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeBag {
    pub attributes: BTreeSet<String>,
}

impl AttributeBag {
    pub fn new<S: Into<String>>(attrs: impl IntoIterator<Item = S>) -> Self {
        Self {
            attributes: attrs.into_iter().map(Into::into).collect(),
        }
    }

    /// Canonical bytes: identical attribute sets encode identically.
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("attribute bag serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    /// Attributes of any image. Real (png/jpeg) inputs carry no attributes.
    pub fn of_image(image: &ImageRef) -> Result<Self, BackendError> {
        let bytes = image.require_bytes()?;
        match image.format {
            ImageFormat::SimJson => Self::decode(bytes).map_err(|e| {
                BackendError::BadRequest(format!("invalid sim-json image {}: {e}", image.short_digest()))
            }),
            ImageFormat::Png | ImageFormat::Jpeg => Ok(Self::default()),
        }
    }

    pub fn into_raw(self) -> RawImage {
        RawImage {
            bytes: self.encode(),
            format: ImageFormat::SimJson,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimBackend {
    world: SimWorldConfig,
}

impl SimBackend {
    pub fn new(world: SimWorldConfig) -> Self {
        Self { world }
    }

    pub fn world(&self) -> &SimWorldConfig {
        &self.world
    }

    /// The judge's score as an exact fraction `(matched, total)`.
    pub fn overlap(&self, prompt: &str, bag: &AttributeBag) -> (usize, usize) {
        let keywords = self.world.keywords(prompt);
        let matched = keywords.iter().filter(|k| bag.attributes.contains(*k)).count();
        (matched, keywords.len())
    }

    fn first_image_bag(&self, images: &[ImageRef]) -> Result<Option<AttributeBag>, BackendError> {
        images.first().map(AttributeBag::of_image).transpose()
    }

    fn answer_policy(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        let (step, t_max) = labelled(request.text, "Step:")
            .and_then(parse_step_line)
            .ok_or_else(|| BackendError::BadRequest("policy prompt without step line".into()))?;

        if let Some(script) = &self.world.scripted_controller {
            let entry = script.get(step - 1).map(String::as_str).unwrap_or("STOP");
            if let Some(raw) = entry.strip_prefix(RAW_SCRIPT_PREFIX) {
                return Ok(raw.to_string());
            }
            return Ok(serde_json::json!({ "action": entry, "reason": "scripted" }).to_string());
        }

        let permitted = permitted_actions(request.text);
        let pick = |preferred: &[ActionKind]| -> ActionKind {
            preferred
                .iter()
                .copied()
                .find(|a| permitted.contains(a))
                .or_else(|| permitted.first().copied())
                .unwrap_or(ActionKind::Stop)
        };

        let has_image = labelled(request.text, "Current image:")
            .is_some_and(|v| v.starts_with("attached"));
        let (action, reason) = if !has_image {
            (
                pick(&[ActionKind::NaiveGeneration]),
                "No image exists yet, so start with a simple generation.".to_string(),
            )
        } else {
            let bag = self
                .first_image_bag(request.images)?
                .ok_or_else(|| BackendError::BadRequest("current image marked but not attached".into()))?;
            let original = labelled(request.text, "Original prompt:").unwrap_or_default();
            let current = labelled(request.text, "Current prompt:").unwrap_or_default();
            let wanted = self.world.keywords(original);
            let missing: Vec<&String> = wanted.iter().filter(|k| !bag.attributes.contains(*k)).collect();
            let current_keywords = self.world.keywords(current);
            let remaining = t_max.saturating_sub(step) + 1;
            if missing.is_empty() {
                (
                    pick(&[ActionKind::Stop, ActionKind::ImageDetailRefinement]),
                    "The current image shows everything the request asks for.".to_string(),
                )
            } else if missing.iter().any(|k| !current_keywords.contains(*k)) {
                (
                    pick(&[ActionKind::PromptRevision, ActionKind::ImageDetailRefinement]),
                    format!(
                        "The current prompt has drifted from the request; {} is missing.",
                        join(&missing)
                    ),
                )
            } else if missing.len() > remaining * self.world.refine_gain as usize {
                (
                    pick(&[ActionKind::BestOfN, ActionKind::ImageDetailRefinement]),
                    format!(
                        "Too many gaps ({}) to fix one at a time; sample several candidates.",
                        join(&missing)
                    ),
                )
            } else {
                (
                    pick(&[ActionKind::ImageDetailRefinement, ActionKind::NaiveGeneration]),
                    format!("The prompt is fine but the image lacks {}.", join(&missing)),
                )
            }
        };
        Ok(serde_json::json!({ "action": action.wire_name(), "reason": reason }).to_string())
    }

    fn answer_enhance(&self, request: &UnderstandRequest<'_>) -> String {
        let prompt = labelled(request.text, "Prompt to enhance:").unwrap_or_default();
        if self.world.echo_enhancement {
            return prompt.to_string();
        }
        let keywords = self.world.keywords(prompt);
        if keywords.is_empty() {
            return prompt.to_string();
        }
        let detail: Vec<String> = keywords.iter().map(|k| format!("highly detailed {k}")).collect();
        format!("{prompt}, {}", detail.join(", "))
    }

    fn answer_revise(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        let bag = self.first_image_bag(request.images)?.unwrap_or_default();
        let original = labelled(request.text, "Original prompt:").unwrap_or_default();
        let current = labelled(request.text, "Current prompt:").unwrap_or_default();
        let mut wanted = self.world.keywords(original);
        wanted.extend(self.world.keywords(current));
        let missing: Vec<&String> = wanted.iter().filter(|k| !bag.attributes.contains(*k)).collect();

        let summary = if bag.attributes.is_empty() {
            "no recognizable attributes".to_string()
        } else {
            bag.attributes.iter().cloned().collect::<Vec<_>>().join(", ")
        };
        let (delta, revised) = if missing.is_empty() {
            ("none".to_string(), current.to_string())
        } else {
            let additions: Vec<String> = missing.iter().map(|k| format!("clearly showing {k}")).collect();
            (
                format!("missing {}", join(&missing)),
                format!("{current}, {}", additions.join(", ")),
            )
        };
        Ok(format!(
            "IMAGE SUMMARY: the image shows {summary}\nDISCREPANCIES: {delta}\nREVISED PROMPT: {revised}"
        ))
    }

    fn answer_refine(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        let bag = self.first_image_bag(request.images)?.unwrap_or_default();
        let current = labelled(request.text, "Current prompt:").unwrap_or_default();
        let missing: Vec<String> = self
            .world
            .keywords(current)
            .into_iter()
            .filter(|k| !bag.attributes.contains(k))
            .collect();
        Ok(if missing.is_empty() {
            "keep the image unchanged".to_string()
        } else {
            format!("add {}", missing.join(", "))
        })
    }

    fn answer_judge(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        let bag = self
            .first_image_bag(request.images)?
            .ok_or_else(|| BackendError::BadRequest("judge request without an image".into()))?;
        let prompt = labelled(request.text, "Prompt:").unwrap_or_default();
        let keywords = self.world.keywords(prompt);
        let (matched, total) = self.overlap(prompt, &bag);
        let missing: Vec<&String> = keywords.iter().filter(|k| !bag.attributes.contains(*k)).collect();
        let critique = if missing.is_empty() {
            "all requested attributes present".to_string()
        } else {
            format!("missing: {}", join(&missing))
        };
        Ok(format!("Score: {} — {critique}", judge_score_text(matched, total)))
    }
}

/// Renders `matched / total` on the judge's 0-10 scale. Exact tenths are
/// written as integers; anything else as the unreduced fraction
/// `matched/total`, which the score parser reads as a proportion.
pub fn judge_score_text(matched: usize, total: usize) -> String {
    if total == 0 {
        return "10".to_string();
    }
    if (10 * matched) % total == 0 {
        (10 * matched / total).to_string()
    } else {
        format!("{matched}/{total}")
    }
}

impl ModelBackend for SimBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_edit: self.world.supports_edit,
            supports_image_in_understand: true,
        }
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::Simulated {
            world: self.world.clone(),
        }
    }

    fn understand(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        let family = request.template_id.split('.').next().unwrap_or_default();
        match family {
            "policy" => self.answer_policy(request),
            "enhance" => Ok(self.answer_enhance(request)),
            "revise" => self.answer_revise(request),
            "refine" => self.answer_refine(request),
            "judge" => self.answer_judge(request),
            other => Err(BackendError::BadRequest(format!("unknown template family {other:?}"))),
        }
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<RawImage, BackendError> {
        let counts = self.world.keyword_counts(prompt);
        let fingerprint = serde_json::to_vec(&counts).expect("counts serialize");
        let mut rng = rng_from(&[b"generate", &seed.to_le_bytes(), &fingerprint]);
        let kept = counts.into_iter().filter_map(|(keyword, mentions)| {
            let drop_probability = self.world.noise_rate.powi(mentions as i32);
            let roll: f64 = rng.random();
            (roll >= drop_probability).then_some(keyword)
        });
        Ok(AttributeBag::new(kept.collect::<Vec<_>>()).into_raw())
    }

    fn edit(&self, prompt: &str, image: &ImageRef, seed: u64) -> Result<RawImage, BackendError> {
        if !self.world.supports_edit {
            return Err(BackendError::CapabilityMissing("edit".into()));
        }
        let mut bag = AttributeBag::of_image(image)?;
        let mut gaps: Vec<String> = self
            .world
            .keywords(prompt)
            .into_iter()
            .filter(|k| !bag.attributes.contains(k))
            .collect();
        let mut rng = rng_from(&[b"edit", &seed.to_le_bytes(), image.digest.as_bytes()]);
        gaps.shuffle(&mut rng);
        bag.attributes
            .extend(gaps.into_iter().take(self.world.refine_gain as usize));
        Ok(bag.into_raw())
    }
}

fn join(items: &[&String]) -> String {
    items.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

/// Value of the first line starting with `label`, trimmed.
fn labelled<'t>(text: &'t str, label: &str) -> Option<&'t str> {
    text.lines()
        .map(str::trim_start)
        .find_map(|line| line.strip_prefix(label))
        .map(str::trim)
}

fn parse_step_line(value: &str) -> Option<(usize, usize)> {
    let (step, t_max) = value.split_once(" of ")?;
    let step: usize = step.trim().parse().ok()?;
    let t_max: usize = t_max.trim().parse().ok()?;
    (step >= 1).then_some((step, t_max))
}

fn permitted_actions(text: &str) -> Vec<ActionKind> {
    text.lines()
        .skip_while(|l| !l.trim_start().starts_with("Permitted actions:"))
        .skip(1)
        .take_while(|l| !l.trim().is_empty())
        .filter_map(|l| {
            let name = l.trim().strip_prefix("- ")?.split(':').next()?;
            ActionKind::from_wire(name)
        })
        .collect()
}
