use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{CallSummary, StrategyError};
use crate::corpus::CharacterProfile;
use crate::prompts::TemplateSet;
use crate::provider::{ModelEndpoint, Provider};

/// A character's self-narrative and the call that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Narrative {
    pub character_id: String,
    pub responder: String,
    pub text: String,
    pub call: CallSummary,
}

type Slot = Arc<Mutex<Option<Narrative>>>;

/// One narrative per `(character, responder)`, generated on first use even
/// when many workers ask at once.
#[derive(Debug, Default)]
pub struct NarrativeCache {
    slots: Mutex<HashMap<(String, String), Slot>>,
}

impl NarrativeCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_generate(
        &self,
        provider: &Provider,
        responder: &ModelEndpoint,
        templates: &TemplateSet,
        profile: &CharacterProfile,
    ) -> Result<Narrative, StrategyError> {
        let slot = {
            let mut slots = self.slots.lock().unwrap();
            slots
                .entry((profile.character_id.clone(), responder.id.clone()))
                .or_default()
                .clone()
        };
        let mut guard = slot.lock().unwrap();
        if let Some(n) = guard.as_ref() {
            return Ok(n.clone());
        }
        let prompt = templates.s2rd_narrative(&profile.name).map_err(StrategyError::at("narrative"))?;
        let reply = provider
            .chat_text(responder, &profile.persona_instruction, &prompt, 0, 0)
            .map_err(StrategyError::at("narrative"))?;
        let narrative = Narrative {
            character_id: profile.character_id.clone(),
            responder: responder.id.clone(),
            call: CallSummary::chat("narrative", &responder.id, &prompt, &reply.response_text),
            text: reply.response_text,
        };
        *guard = Some(narrative.clone());
        Ok(narrative)
    }

    /// Every narrative generated so far, ordered by character then responder.
    pub fn all(&self) -> Vec<Narrative> {
        let slots = self.slots.lock().unwrap();
        let mut out: Vec<Narrative> = slots.values().filter_map(|s| s.lock().unwrap().clone()).collect();
        out.sort_by(|a, b| (&a.character_id, &a.responder).cmp(&(&b.character_id, &b.responder)));
        out
    }
}
