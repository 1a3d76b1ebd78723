//! Structured agent representation, the collision prompt catalog, and the
//! interpreter-client boundary that turns prompt text into a scene.
//!
//! A scene document is JSON:
//!
//! ```json
//! { "ego": { "quadrant": 1, "distance_bin": 0, "orientation": "parallel_same",
//!            "speed_bin": 2, "action": "keep_speed" },
//!   "others": [ { "quadrant": 1, "distance_bin": 1, "orientation": "parallel_opposite",
//!                 "speed_bin": 3, "action": "keep_speed" } ] }
//! ```
//!
//! Quadrants are taken in the ego frame (x forward, y left): 1 front-left,
//! 2 rear-left, 3 rear-right, 4 front-right. Distance bin `i` covers
//! `[20i, 20(i+1))` metres and speed bin `i` covers `[2.5i, 2.5(i+1))` m/s.
//! Orientation is the agent's heading relative to the ego heading;
//! `perpendicular_left` points to the ego's left.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::MAX_AGENTS;

pub const DISTANCE_BIN_WIDTH: f64 = 20.0;
pub const SPEED_BIN_WIDTH: f64 = 2.5;
/// Width of the per-agent vector; slots past the fifth are reserved and zero.
pub const AGENT_VECTOR_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    ParallelSame,
    ParallelOpposite,
    PerpendicularLeft,
    PerpendicularRight,
}

impl Orientation {
    pub const ALL: [Orientation; 4] = [
        Orientation::ParallelSame,
        Orientation::ParallelOpposite,
        Orientation::PerpendicularLeft,
        Orientation::PerpendicularRight,
    ];

    /// Heading offset from the ego heading, radians.
    pub fn relative_heading(self) -> f64 {
        match self {
            Orientation::ParallelSame => 0.0,
            Orientation::ParallelOpposite => std::f64::consts::PI,
            Orientation::PerpendicularLeft => FRAC_PI_2,
            Orientation::PerpendicularRight => -FRAC_PI_2,
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&o| o == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    TurnLeft,
    TurnRight,
    Accelerate,
    Decelerate,
    KeepSpeed,
    Stop,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::TurnLeft,
        Action::TurnRight,
        Action::Accelerate,
        Action::Decelerate,
        Action::KeepSpeed,
        Action::Stop,
    ];

    fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredAgentSpec {
    pub quadrant: u8,
    pub distance_bin: u32,
    pub orientation: Orientation,
    pub speed_bin: u32,
    pub action: Action,
}

impl StructuredAgentSpec {
    pub fn distance_range(&self) -> (f64, f64) {
        let lo = self.distance_bin as f64 * DISTANCE_BIN_WIDTH;
        (lo, lo + DISTANCE_BIN_WIDTH)
    }

    pub fn distance_midpoint(&self) -> f64 {
        (self.distance_bin as f64 + 0.5) * DISTANCE_BIN_WIDTH
    }

    pub fn speed_range(&self) -> (f64, f64) {
        let lo = self.speed_bin as f64 * SPEED_BIN_WIDTH;
        (lo, lo + SPEED_BIN_WIDTH)
    }

    pub fn speed_midpoint(&self) -> f64 {
        (self.speed_bin as f64 + 0.5) * SPEED_BIN_WIDTH
    }

    /// The fixed-width numeric form; the last three slots are reserved.
    pub fn to_vector(&self) -> [f64; AGENT_VECTOR_DIM] {
        [
            self.quadrant as f64,
            self.distance_bin as f64,
            self.orientation.index() as f64,
            self.speed_bin as f64,
            self.action.index() as f64,
            0.0,
            0.0,
            0.0,
        ]
    }

    fn check(&self, who: &str) -> Result<()> {
        if !(1..=4).contains(&self.quadrant) {
            return Err(Error::Range(format!(
                "{who}: quadrant must be 1-4, got {}",
                self.quadrant
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuredScene {
    pub ego: StructuredAgentSpec,
    #[serde(default)]
    pub others: Vec<StructuredAgentSpec>,
}

impl StructuredScene {
    pub fn agent_count(&self) -> usize {
        1 + self.others.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.agent_count() > MAX_AGENTS {
            return Err(Error::Range(format!(
                "scene has {} agents, at most {MAX_AGENTS} allowed",
                self.agent_count()
            )));
        }
        self.ego.check("ego")?;
        for (i, o) in self.others.iter().enumerate() {
            o.check(&format!("others[{i}]"))?;
        }
        Ok(())
    }
}

pub fn parse_structured_scene(text: &str) -> Result<StructuredScene> {
    let scene: StructuredScene =
        serde_json::from_str(text).map_err(|e| Error::json("scene document", &e))?;
    scene.validate()?;
    Ok(scene)
}

/// Canonical document text for a scene.
pub fn emit_structured_scene(scene: &StructuredScene) -> String {
    serde_json::to_string_pretty(scene).expect("scene serializes")
}

/// Partial agent description used inside templates and slot values.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadrant: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance_bin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<Orientation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_bin: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    /// Slots whose bound value is merged over this agent, in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub apply: Vec<String>,
}

impl AgentPatch {
    fn merge(&mut self, over: &AgentPatch) {
        self.quadrant = over.quadrant.or(self.quadrant);
        self.distance_bin = over.distance_bin.or(self.distance_bin);
        self.orientation = over.orientation.or(self.orientation);
        self.speed_bin = over.speed_bin.or(self.speed_bin);
        self.action = over.action.or(self.action);
    }

    fn complete(&self, template: &str, who: &str) -> Result<StructuredAgentSpec> {
        let missing = |f: &str| Error::Template(format!("{template}: {who} has no {f}"));
        Ok(StructuredAgentSpec {
            quadrant: self.quadrant.ok_or_else(|| missing("quadrant"))?,
            distance_bin: self.distance_bin.ok_or_else(|| missing("distance_bin"))?,
            orientation: self.orientation.ok_or_else(|| missing("orientation"))?,
            speed_bin: self.speed_bin.ok_or_else(|| missing("speed_bin"))?,
            action: self.action.ok_or_else(|| missing("action"))?,
        })
    }
}

/// A collision description with `{slot}` placeholders, paired with the scene
/// each binding of its slots denotes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
    /// Bundled map names the template is meant for.
    #[serde(default)]
    pub maps: Vec<String>,
    /// Slot name → value label → patch applied to agents that list the slot.
    #[serde(default)]
    pub slots: BTreeMap<String, BTreeMap<String, AgentPatch>>,
    pub ego: AgentPatch,
    pub others: Vec<AgentPatch>,
}

pub type Bindings = BTreeMap<String, String>;

fn placeholders(text: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or_else(|| Error::Template(format!("unclosed placeholder in {text:?}")))?;
        out.push(&after[..close]);
        rest = &after[close + 1..];
    }
    Ok(out)
}

impl PromptTemplate {
    pub fn slot_names(&self) -> Vec<&str> {
        self.slots.keys().map(String::as_str).collect()
    }

    /// Checks that every placeholder and every `apply` entry names a declared slot.
    pub fn validate(&self) -> Result<()> {
        for p in placeholders(&self.text)? {
            if !self.slots.contains_key(p) {
                return Err(Error::Template(format!(
                    "{}: placeholder {{{p}}} has no declared domain",
                    self.name
                )));
            }
        }
        for agent in std::iter::once(&self.ego).chain(&self.others) {
            for s in &agent.apply {
                if !self.slots.contains_key(s) {
                    return Err(Error::Template(format!("{}: unknown slot {s:?} in apply", self.name)));
                }
            }
        }
        for (slot, domain) in &self.slots {
            if domain.is_empty() {
                return Err(Error::Template(format!("{}: slot {slot} has an empty domain", self.name)));
            }
        }
        Ok(())
    }

    /// Every binding over the declared slot domains, in lexicographic order.
    pub fn all_bindings(&self) -> Vec<Bindings> {
        let mut acc = vec![Bindings::new()];
        for (slot, domain) in &self.slots {
            acc = acc
                .into_iter()
                .flat_map(|b| {
                    domain.keys().map(move |label| {
                        let mut b = b.clone();
                        b.insert(slot.clone(), label.clone());
                        b
                    })
                })
                .collect();
        }
        acc
    }

    /// Fills the placeholders and builds the paired scene.
    pub fn expand(&self, bindings: &Bindings) -> Result<(String, StructuredScene)> {
        for slot in bindings.keys() {
            if !self.slots.contains_key(slot) {
                return Err(Error::Template(format!("{}: unknown slot {slot:?}", self.name)));
            }
        }
        let mut chosen: HashMap<&str, &AgentPatch> = HashMap::new();
        for (slot, domain) in &self.slots {
            let label = bindings
                .get(slot)
                .ok_or_else(|| Error::Template(format!("{}: missing binding for slot {slot:?}", self.name)))?;
            let patch = domain.get(label).ok_or_else(|| {
                Error::Template(format!("{}: {label:?} is not in the domain of slot {slot:?}", self.name))
            })?;
            chosen.insert(slot.as_str(), patch);
        }

        let mut text = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            text.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let close = after
                .find('}')
                .ok_or_else(|| Error::Template(format!("{}: unclosed placeholder", self.name)))?;
            let slot = &after[..close];
            let label = bindings
                .get(slot)
                .ok_or_else(|| Error::Template(format!("{}: missing binding for slot {slot:?}", self.name)))?;
            text.push_str(label);
            rest = &after[close + 1..];
        }
        text.push_str(rest);

        let resolve = |base: &AgentPatch, who: &str| -> Result<StructuredAgentSpec> {
            let mut agent = base.clone();
            for s in &base.apply {
                let patch = chosen
                    .get(s.as_str())
                    .ok_or_else(|| Error::Template(format!("{}: unknown slot {s:?} in apply", self.name)))?;
                agent.merge(patch);
            }
            agent.complete(&self.name, who)
        };
        let mut ego_patch = self.ego.clone();
        ego_patch.quadrant = ego_patch.quadrant.or(Some(1));
        ego_patch.distance_bin = ego_patch.distance_bin.or(Some(0));
        let scene = StructuredScene {
            ego: resolve(&ego_patch, "ego")?,
            others: self
                .others
                .iter()
                .enumerate()
                .map(|(i, o)| resolve(o, &format!("others[{i}]")))
                .collect::<Result<_>>()?,
        };
        scene.validate()?;
        Ok((text, scene))
    }
}

/// An ordered set of uniquely named templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateCatalog {
    pub templates: Vec<PromptTemplate>,
}

const BUILTIN_CATALOG: &str = include_str!("../data/templates.json");

impl TemplateCatalog {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_CATALOG).expect("bundled catalog is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cat: TemplateCatalog =
            serde_json::from_str(text).map_err(|e| Error::json("template catalog", &e))?;
        let mut seen = std::collections::BTreeSet::new();
        for t in &cat.templates {
            t.validate()?;
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Template(format!("duplicate template name {}", t.name)));
            }
        }
        Ok(cat)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn get(&self, name: &str) -> Option<&PromptTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }
}

/// Text-in, text-out backend that turns a collision description into a scene document.
///
/// Implementations must tolerate concurrent calls.
pub trait InterpreterClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Runs `prompt` through `client` and parses the reply as a scene document.
pub fn interpret(prompt: &str, client: &dyn InterpreterClient) -> Result<StructuredScene> {
    let reply = client.complete(prompt)?;
    parse_structured_scene(&reply).map_err(|e| match e {
        Error::Parse {
            context,
            line,
            column,
            message,
            ..
        } => Error::Parse {
            context,
            line,
            column,
            message,
            payload: Some(reply.clone()),
        },
        other => other,
    })
}

fn normalize_prompt(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Offline backend: answers exactly the prompts the catalog can produce.
pub struct TemplateClient {
    answers: HashMap<String, String>,
}

impl TemplateClient {
    pub fn new(catalog: &TemplateCatalog) -> Result<Self> {
        let mut answers = HashMap::new();
        for t in &catalog.templates {
            for b in t.all_bindings() {
                let (text, scene) = t.expand(&b)?;
                answers
                    .entry(normalize_prompt(&text))
                    .or_insert_with(|| emit_structured_scene(&scene));
            }
        }
        Ok(Self { answers })
    }
}

impl InterpreterClient for TemplateClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.answers
            .get(&normalize_prompt(prompt))
            .cloned()
            .ok_or_else(|| Error::Interpreter(format!("no template match for {prompt:?}")))
    }
}

/// Replays stored responses; stands in for a networked language model in tests.
#[derive(Debug, Default, Clone)]
pub struct RecordedClient {
    responses: HashMap<String, String>,
}

impl RecordedClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        self.responses.insert(prompt.into(), response.into());
        self
    }
}

impl InterpreterClient for RecordedClient {
    fn complete(&self, prompt: &str) -> Result<String> {
        self.responses
            .get(prompt)
            .cloned()
            .ok_or_else(|| Error::Interpreter(format!("no recorded response for {prompt:?}")))
    }
}

/// Request text for a language-model backend: format instructions, one
/// worked example from the catalog, then the description to translate.
pub fn llm_request(catalog: &TemplateCatalog, description: &str) -> Result<String> {
    let mut req = String::from(
        "Translate the traffic collision description into a scene document.\n\
         Reply with JSON only: {\"ego\": AGENT, \"others\": [AGENT, ...]} where AGENT has\n\
         quadrant (1 front-left, 2 rear-left, 3 rear-right, 4 front-right, relative to the ego),\n\
         distance_bin (i means 20i to 20(i+1) metres), orientation (parallel_same,\n\
         parallel_opposite, perpendicular_left, perpendicular_right), speed_bin\n\
         (i means 2.5i to 2.5(i+1) m/s) and action (turn_left, turn_right, accelerate,\n\
         decelerate, keep_speed, stop). At most 32 agents.\n\n",
    );
    if let Some(t) = catalog.templates.first() {
        if let Some(b) = t.all_bindings().into_iter().next() {
            let (text, scene) = t.expand(&b)?;
            req.push_str("Description: ");
            req.push_str(&text);
            req.push_str("\nScene: ");
            req.push_str(&serde_json::to_string(&scene).expect("scene serializes"));
            req.push_str("\n\n");
        }
    }
    req.push_str("Description: ");
    req.push_str(description);
    req.push_str("\nScene:");
    Ok(req)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agent(q: u8, d: u32, o: Orientation, s: u32, a: Action) -> StructuredAgentSpec {
        StructuredAgentSpec {
            quadrant: q,
            distance_bin: d,
            orientation: o,
            speed_bin: s,
            action: a,
        }
    }

    const TWO_AGENT: &str = r#"{
        "ego": {"quadrant": 1, "distance_bin": 0, "orientation": "parallel_same", "speed_bin": 2, "action": "keep_speed"},
        "others": [{"quadrant": 1, "distance_bin": 0, "orientation": "parallel_opposite", "speed_bin": 2, "action": "keep_speed"}]
    }"#;

    #[test]
    fn parses_two_agent_document() {
        let s = parse_structured_scene(TWO_AGENT).unwrap();
        assert_eq!(s.agent_count(), 2);
        assert_eq!(
            s.others[0],
            agent(1, 0, Orientation::ParallelOpposite, 2, Action::KeepSpeed)
        );
    }

    #[test]
    fn quadrant_zero_is_range_error() {
        let doc = TWO_AGENT.replacen("\"quadrant\": 1, \"distance_bin\": 0, \"orientation\": \"parallel_opposite\"", "\"quadrant\": 0, \"distance_bin\": 0, \"orientation\": \"parallel_opposite\"", 1);
        assert!(matches!(parse_structured_scene(&doc), Err(Error::Range(_))));
    }

    #[test]
    fn syntax_error_has_position() {
        match parse_structured_scene("{\"ego\": ") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let doc = TWO_AGENT.replacen("\"action\": \"keep_speed\"}", "\"action\": \"keep_speed\", \"colour\": 3}", 1);
        assert!(matches!(parse_structured_scene(&doc), Err(Error::Parse { .. })));
    }

    #[test]
    fn too_many_agents() {
        let a = agent(1, 0, Orientation::ParallelSame, 0, Action::KeepSpeed);
        let scene = StructuredScene { ego: a, others: vec![a; 32] };
        let err = parse_structured_scene(&emit_structured_scene(&scene)).unwrap_err();
        assert!(matches!(err, Error::Range(_)));
    }

    #[test]
    fn vector_has_reserved_slots() {
        let v = agent(3, 2, Orientation::PerpendicularLeft, 4, Action::Stop).to_vector();
        assert_eq!(v, [3.0, 2.0, 2.0, 4.0, 5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn emit_parse_identity_exhaustive() {
        for q in 1..=4u8 {
            for d in 0..=4 {
                for o in Orientation::ALL {
                    for s in 0..=4 {
                        for a in Action::ALL {
                            let x = agent(q, d, o, s, a);
                            let scene = StructuredScene { ego: x, others: vec![x] };
                            let back = parse_structured_scene(&emit_structured_scene(&scene)).unwrap();
                            assert_eq!(back, scene);
                        }
                    }
                }
            }
        }
    }

    fn head_on() -> PromptTemplate {
        serde_json::from_str(
            r#"{
            "name": "head_on",
            "text": "A vehicle approaches from the {direction} and collides head-on with the ego vehicle.",
            "slots": {"direction": {"front": {"quadrant": 1, "orientation": "parallel_opposite"}}},
            "ego": {"orientation": "parallel_same", "speed_bin": 2, "action": "turn_left"},
            "others": [{"distance_bin": 1, "speed_bin": 3, "action": "keep_speed", "apply": ["direction"]}]
        }"#,
        )
        .unwrap()
    }

    #[test]
    fn template_expansion() {
        let t = head_on();
        t.validate().unwrap();
        let b: Bindings = [("direction".to_string(), "front".to_string())].into();
        let (text, scene) = t.expand(&b).unwrap();
        assert_eq!(text, "A vehicle approaches from the front and collides head-on with the ego vehicle.");
        assert_eq!(scene.others.len(), 1);
        assert_eq!(scene.others[0].quadrant, 1);
        assert_eq!(scene.others[0].orientation, Orientation::ParallelOpposite);
        assert_eq!(t.expand(&b).unwrap(), (text, scene));
    }

    #[test]
    fn template_binding_errors() {
        let t = head_on();
        let err = t.expand(&Bindings::new()).unwrap_err();
        assert!(err.to_string().contains("direction"), "{err}");
        let mut b: Bindings = [("direction".to_string(), "front".to_string())].into();
        b.insert("weather".into(), "rain".into());
        assert!(t.expand(&b).unwrap_err().to_string().contains("unknown slot"));
        let mut bad = head_on();
        bad.text.push_str(" {speed}");
        assert!(bad.validate().is_err());
    }

    #[test]
    fn catalog_covers_required_directions() {
        let cat = TemplateCatalog::builtin();
        assert!(cat.templates.len() >= 12);
        let all_text: String = cat
            .templates
            .iter()
            .flat_map(|t| t.all_bindings().into_iter().map(move |b| t.expand(&b).unwrap().0))
            .collect::<Vec<_>>()
            .join("\n");
        for dir in ["left front", "front", "right front", "left", "right", "rear", "intersection"] {
            assert!(all_text.contains(dir), "catalog lacks {dir}");
        }
    }

    #[test]
    fn every_catalog_binding_parses() {
        let cat = TemplateCatalog::builtin();
        for t in &cat.templates {
            for b in t.all_bindings() {
                let (_, scene) = t.expand(&b).unwrap();
                let doc = emit_structured_scene(&scene);
                assert_eq!(parse_structured_scene(&doc).unwrap(), scene, "{}", t.name);
            }
        }
    }

    #[test]
    fn template_client_lookup() {
        let cat = TemplateCatalog::builtin();
        let client = TemplateClient::new(&cat).unwrap();
        let t = &cat.templates[0];
        let b = t.all_bindings().remove(0);
        let (text, scene) = t.expand(&b).unwrap();
        assert_eq!(interpret(&text, &client).unwrap(), scene);
        assert!(matches!(
            interpret("a cow crosses the road", &client),
            Err(Error::Interpreter(m)) if m.contains("no template match")
        ));
    }

    #[test]
    fn malformed_reply_keeps_payload() {
        let client = RecordedClient::new().with("crash", "{\"ego\": oops}");
        match interpret("crash", &client) {
            Err(Error::Parse { payload: Some(p), .. }) => assert_eq!(p, "{\"ego\": oops}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn llm_request_mentions_description() {
        let req = llm_request(&TemplateCatalog::builtin(), "a truck runs a red light").unwrap();
        assert!(req.ends_with("Description: a truck runs a red light\nScene:"));
    }
}
