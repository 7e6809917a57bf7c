use crate::backends::{ChatMessage, ContentPart, Role};
use crate::mask::{EdgeSet, Rect};

use super::TaskQuery;

pub const OCCLUSION_SCHEMA: &str = r#"{"target": string, "occluders": [string]}"#;
pub const BOUNDARY_SCHEMA: &str =
    r#"{"truncated": bool, "expansion": {"left": number, "right": number, "top": number, "bottom": number}, "rationale": string}"#;
pub const DESCRIPTION_SCHEMA: &str = r#"{"description": string}"#;
pub const COMBINED_SCHEMA: &str = r#"{"target": string, "occluders": [string], "truncated": bool, "expansion": {"left": number, "right": number, "top": number, "bottom": number}, "description": string}"#;

pub const OCCLUDER_EXCLUSION: &str =
    "Do not mention any object that covers or hides the target, and do not describe the occlusion itself.";

const OCCLUSION_SYSTEM: &str = "You analyse depth ordering in photographs. \
Given an image and the name of a target object, decide which objects lie in front of the target \
and hide part of it. List every such occluder by a short noun phrase that a segmentation model \
can find. Objects behind the target or merely adjacent to it are not occluders. \
If nothing hides the target, return an empty list.";

const BOUNDARY_SYSTEM: &str = "You judge whether an object is cut off by the image frame. \
Given an image and a target object, decide whether parts of the target extend beyond the image \
borders, and for each border estimate how far the canvas must grow to contain the whole object. \
Give each expansion as a fraction of the original image width (left, right) or height (top, bottom), \
between 0 and 2. Use 0 for every border the object does not cross. \
If the object is complete inside the frame, set truncated to false and all expansions to 0.";

const DESCRIPTION_SYSTEM: &str = "You write prompts for an image inpainting model that must \
redraw an entire object. Describe the target object as it would look if fully visible: \
first its visible attributes (category, colour, material, texture, pose), then plausible \
characteristics of the hidden parts inferred from the visible ones. Write one concise paragraph.";

const COMBINED_SYSTEM: &str = "You analyse an image containing a partially hidden target object. \
In a single answer: name the objects in front of the target that hide it; decide whether the target \
is cut off by the image frame and estimate per-border canvas expansion as a fraction of the original \
width (left, right) or height (top, bottom), between 0 and 2; and write a one-paragraph description \
of the complete object for an inpainting model.";

fn schema_line(schema: &str) -> String {
    format!("Respond with a single JSON object and nothing else, matching this schema: {schema}")
}

fn user_turn(q: &TaskQuery, text: String) -> ChatMessage {
    ChatMessage {
        role: Role::User,
        content: vec![ContentPart::ImagePng(q.png().clone()), ContentPart::Text(text)],
    }
}

pub fn build_occlusion_prompt(q: &TaskQuery) -> Vec<ChatMessage> {
    vec![
        ChatMessage::text(Role::System, OCCLUSION_SYSTEM),
        user_turn(
            q,
            format!(
                "Target object: \"{}\".\nWhich objects occlude it?\n{}",
                q.text(),
                schema_line(OCCLUSION_SCHEMA)
            ),
        ),
    ]
}

/// Geometric context for the boundary agent, derived from the visible mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryPrior {
    pub bbox: Rect,
    pub touched: EdgeSet,
    pub image_width: u32,
    pub image_height: u32,
}

impl BoundaryPrior {
    /// `[x0, y0, x1, y1]` as fractions of the image size, 3 decimals.
    pub fn normalized_bbox(&self) -> String {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        let b = self.bbox;
        format!(
            "[{:.3}, {:.3}, {:.3}, {:.3}]",
            b.x as f64 / w,
            b.y as f64 / h,
            b.right() as f64 / w,
            b.bottom() as f64 / h
        )
    }
}

/// Without a prior the agent reasons from the image alone.
pub fn build_boundary_prompt(q: &TaskQuery, prior: Option<&BoundaryPrior>) -> Vec<ChatMessage> {
    let mut text = format!("Target object: \"{}\".\n", q.text());
    if let Some(p) = prior {
        let touched = if p.touched.is_empty() {
            "none".to_string()
        } else {
            p.touched.names().join(", ")
        };
        text.push_str(&format!(
            "The visible part of the target has bounding box {} (x0, y0, x1, y1 as fractions of \
             the image size). Borders touched by the visible part: {touched}.\n\
             A touched border suggests the object continues beyond it; an untouched border may still \
             be crossed if the object is hidden right at the edge.\n",
            p.normalized_bbox()
        ));
    }
    text.push_str("Is the target cut off by the frame, and by how much should each border grow?\n");
    text.push_str(&schema_line(BOUNDARY_SCHEMA));
    vec![ChatMessage::text(Role::System, BOUNDARY_SYSTEM), user_turn(q, text)]
}

pub fn build_description_prompt(q: &TaskQuery) -> Vec<ChatMessage> {
    vec![
        ChatMessage::text(Role::System, DESCRIPTION_SYSTEM),
        user_turn(
            q,
            format!(
                "Target object: \"{}\".\nDescribe the complete object: visible attributes first, \
                 then the inferred appearance of its hidden parts. {OCCLUDER_EXCLUSION}\n{}",
                q.text(),
                schema_line(DESCRIPTION_SCHEMA)
            ),
        ),
    ]
}

pub fn build_combined_prompt(q: &TaskQuery) -> Vec<ChatMessage> {
    vec![
        ChatMessage::text(Role::System, COMBINED_SYSTEM),
        user_turn(
            q,
            format!(
                "Target object: \"{}\".\nIn the description: {OCCLUDER_EXCLUSION}\n{}",
                q.text(),
                schema_line(COMBINED_SCHEMA)
            ),
        ),
    ]
}

/// Follow-up turn after a reply that failed validation.
pub fn retry_message(error: &str, schema: &str) -> ChatMessage {
    ChatMessage::text(
        Role::User,
        format!("Your previous reply could not be used: {error}. {}", schema_line(schema)),
    )
}
