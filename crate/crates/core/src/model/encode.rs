use crate::corpus::Conversation;
use crate::error::{Error, Result};
use crate::taxonomy::{DialogAct, Emotion, FactorTriple};
use crate::text::Vocab;

/// Speaker row used for the responding party; everyone else maps to 0.
pub const RESPONDER: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedUtterance {
    pub tokens: Vec<usize>,
    pub speaker: usize,
    pub da: Option<DialogAct>,
    pub em: Option<Emotion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedExample {
    pub context: Vec<EncodedUtterance>,
    pub response: Vec<usize>,
    pub response_speaker: usize,
    pub triple: Option<FactorTriple>,
}

/// Speakers are relative: utterances by the final speaker get row 1.
pub fn encode_context(vocab: &Vocab, conv: &Conversation) -> Result<Vec<EncodedUtterance>> {
    if conv.utterances.is_empty() {
        return Err(Error::invalid(format!("conversation `{}` is empty", conv.id)));
    }
    let responder = conv.response().speaker;
    conv.context()
        .iter()
        .map(|u| {
            let tokens = vocab.encode(&u.text);
            if tokens.is_empty() {
                return Err(Error::invalid(format!(
                    "conversation `{}` has an utterance with no tokens",
                    conv.id
                )));
            }
            Ok(EncodedUtterance {
                tokens,
                speaker: usize::from(u.speaker == responder),
                da: Some(u.da),
                em: Some(u.em),
            })
        })
        .collect()
}

pub fn encode_conversation(vocab: &Vocab, conv: &Conversation) -> Result<EncodedExample> {
    let context = encode_context(vocab, conv)?;
    if context.is_empty() {
        return Err(Error::invalid(format!(
            "conversation `{}` has no context before the response",
            conv.id
        )));
    }
    let response = conv.response();
    Ok(EncodedExample {
        context,
        response: vocab.encode(&response.text),
        response_speaker: RESPONDER,
        triple: Some(conv.response_triple()),
    })
}
