//! Text to model-input mapping: tokenizer plus the prompt wrappers that turn
//! an instruction into a forward source and a response into a reverse source.

use serde::{Deserialize, Serialize};

use super::{ModelError, TokenId, Tokenizer};

pub const INSTRUCTION_MARKER: &str = "{instruction}";
pub const RESPONSE_MARKER: &str = "{response}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    /// Wraps an instruction before the forward model sees it.
    pub forward: String,
    /// Wraps a response before the reverse model sees it.
    pub reverse: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self { forward: INSTRUCTION_MARKER.into(), reverse: RESPONSE_MARKER.into() }
    }
}

/// A template split around its single marker, with both sides pre-encoded.
#[derive(Debug, Clone, PartialEq)]
struct Wrapper {
    prefix: Vec<TokenId>,
    suffix: Vec<TokenId>,
}

impl Wrapper {
    fn parse(tokenizer: &Tokenizer, template: &str, marker: &str) -> Result<Self, ModelError> {
        let mut parts = template.split(marker);
        let (Some(pre), Some(post), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ModelError::InvalidTemplate(format!("template {template:?} must contain {marker} exactly once")));
        };
        Ok(Self { prefix: tokenizer.encode(pre)?, suffix: tokenizer.encode(post)? })
    }

    fn wrap(&self, body: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.prefix.len() + body.len() + self.suffix.len());
        out.extend_from_slice(&self.prefix);
        out.extend_from_slice(body);
        out.extend_from_slice(&self.suffix);
        out
    }
}

#[derive(Debug, Clone)]
pub struct TextCodec {
    tokenizer: Tokenizer,
    templates: PromptTemplates,
    forward: Wrapper,
    reverse: Wrapper,
}

impl TextCodec {
    pub fn new(tokenizer: Tokenizer, templates: PromptTemplates) -> Result<Self, ModelError> {
        let forward = Wrapper::parse(&tokenizer, &templates.forward, INSTRUCTION_MARKER)?;
        let reverse = Wrapper::parse(&tokenizer, &templates.reverse, RESPONSE_MARKER)?;
        Ok(Self { tokenizer, templates, forward, reverse })
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        self.tokenizer.encode(text)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        self.tokenizer.decode(ids)
    }

    /// Forward-model source for already-encoded instruction tokens.
    pub fn wrap_instruction(&self, instruction: &[TokenId]) -> Vec<TokenId> {
        self.forward.wrap(instruction)
    }

    /// Reverse-model source for already-encoded response tokens.
    pub fn wrap_response(&self, response: &[TokenId]) -> Vec<TokenId> {
        self.reverse.wrap(response)
    }
}
