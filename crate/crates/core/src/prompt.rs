//! Prompt construction for every query the engine sends.
//!
//! All builders are pure string assembly over fixed templates. The outputs are
//! byte-stable and checked against golden fixtures under `tests/golden/`.
//!
//! The three-hop flow threads a [`HopContext`] through the hops:
//!
//! ```text
//! C1 = Given the sentence "X"
//! C2 = C1 A
//! C3 = C2 O
//! ```
//!
//! where `A` and `O` are the selected answers of hops 1 and 2, joined with a
//! single space.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const STEP1_SUFFIX_HEAD: &str = ", which specific aspect of ";
const STEP1_SUFFIX_TAIL: &str = " is possibly mentioned?";
const STEP2_SUFFIX_HEAD: &str =
    ". Based on the common sense, what is the implicit opinion towards the mentioned aspect of ";
const STEP2_SUFFIX_TAIL: &str = ", and why?";
const STEP3_SUFFIX_HEAD: &str = ". Based on the opinion, what is the sentiment polarity towards ";
const ZEROCOT_SUFFIX: &str = " Let's think step by step.";
const REVISE_QUESTION_HEAD: &str = "What is the sentiment polarity towards ";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("field `{0}` is empty")]
    EmptyField(&'static str),
    #[error("step {0} is not a valid hop for this operation")]
    BadStep(u8),
    #[error("hop {step} expects {expected}")]
    WrongInput { step: u8, expected: &'static str },
    #[error("hop {step} needs the context of hop {}, got hop {got}", step - 1)]
    OutOfSequence { step: u8, got: u8 },
}

/// A complete prompt, ready to send to a backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptText(String);

impl PromptText {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn into_string(self) -> String {
        self.0
    }
}

impl fmt::Display for PromptText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for PromptText {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

/// Index of a reasoning hop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HopStep {
    /// Which aspect of the target is mentioned.
    Aspect,
    /// What the implicit opinion towards that aspect is.
    Opinion,
    /// The final polarity.
    Polarity,
}

impl HopStep {
    pub const ALL: [HopStep; 3] = [HopStep::Aspect, HopStep::Opinion, HopStep::Polarity];

    pub fn index(self) -> u8 {
        match self {
            HopStep::Aspect => 1,
            HopStep::Opinion => 2,
            HopStep::Polarity => 3,
        }
    }
}

impl TryFrom<u8> for HopStep {
    type Error = PromptError;

    fn try_from(step: u8) -> Result<Self, Self::Error> {
        match step {
            1 => Ok(HopStep::Aspect),
            2 => Ok(HopStep::Opinion),
            3 => Ok(HopStep::Polarity),
            other => Err(PromptError::BadStep(other)),
        }
    }
}

/// Accumulated reasoning context (C1, C2 or C3).
///
/// `step` is the hop whose prompt was built from this text. Extending the
/// context with an answer keeps the step; the next hop's builder advances it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HopContext {
    step: HopStep,
    text: String,
}

impl HopContext {
    /// The first-hop context `Given the sentence "X"`.
    pub fn initial(sentence: &str) -> Result<Self, PromptError> {
        require("sentence", sentence)?;
        Ok(HopContext {
            step: HopStep::Aspect,
            text: format!("Given the sentence \"{sentence}\""),
        })
    }

    pub fn step(&self) -> HopStep {
        self.step
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

/// What a hop prompt is built from: the raw sentence for hop 1, the extended
/// previous context for hops 2 and 3.
#[derive(Debug, Clone, Copy)]
pub enum HopInput<'a> {
    Sentence(&'a str),
    Context(&'a HopContext),
}

fn require(name: &'static str, value: &str) -> Result<(), PromptError> {
    if value.trim().is_empty() {
        Err(PromptError::EmptyField(name))
    } else {
        Ok(())
    }
}

/// `Given the sentence "{X}", what is the sentiment polarity towards {t}?`
pub fn build_vanilla_prompt(sentence: &str, target: &str) -> Result<PromptText, PromptError> {
    require("sentence", sentence)?;
    require("target", target)?;
    Ok(PromptText(format!(
        "Given the sentence \"{sentence}\", what is the sentiment polarity towards {target}?"
    )))
}

/// The vanilla prompt followed by ` Let's think step by step.`
pub fn build_zerocot_prompt(sentence: &str, target: &str) -> Result<PromptText, PromptError> {
    let mut prompt = build_vanilla_prompt(sentence, target)?;
    prompt.0.push_str(ZEROCOT_SUFFIX);
    Ok(prompt)
}

/// Builds the prompt for hop `step` and returns it with the context it was
/// built from (relabelled to `step`).
pub fn build_hop_prompt(
    step: u8,
    input: HopInput<'_>,
    target: &str,
) -> Result<(PromptText, HopContext), PromptError> {
    let step = HopStep::try_from(step)?;
    require("target", target)?;

    let context = match (step, input) {
        (HopStep::Aspect, HopInput::Sentence(sentence)) => HopContext::initial(sentence)?,
        (HopStep::Aspect, HopInput::Context(_)) => {
            return Err(PromptError::WrongInput {
                step: 1,
                expected: "the raw sentence",
            })
        }
        (_, HopInput::Sentence(_)) => {
            return Err(PromptError::WrongInput {
                step: step.index(),
                expected: "the previous hop's context",
            })
        }
        (_, HopInput::Context(previous)) => {
            require("context", &previous.text)?;
            if previous.step.index() + 1 != step.index() {
                return Err(PromptError::OutOfSequence {
                    step: step.index(),
                    got: previous.step.index(),
                });
            }
            HopContext {
                step,
                text: previous.text.clone(),
            }
        }
    };

    let text = match step {
        HopStep::Aspect => {
            format!(
                "{}{STEP1_SUFFIX_HEAD}{target}{STEP1_SUFFIX_TAIL}",
                context.text
            )
        }
        HopStep::Opinion => {
            format!(
                "{}{STEP2_SUFFIX_HEAD}{target}{STEP2_SUFFIX_TAIL}",
                context.text
            )
        }
        HopStep::Polarity => format!("{}{STEP3_SUFFIX_HEAD}{target}?", context.text),
    };
    Ok((PromptText(text), context))
}

/// Appends a selected answer to the context with a single space.
pub fn extend_context(context: &HopContext, answer: &str) -> Result<HopContext, PromptError> {
    require("answer", answer)?;
    Ok(HopContext {
        step: context.step,
        text: format!("{} {answer}", context.text),
    })
}

/// Context, the hop's answer and the final polarity question, used as the
/// input of a supervised revising example. Only hops 1 and 2 have one.
pub fn assemble_revising_prompt(
    step: u8,
    context: &HopContext,
    answer: &str,
    target: &str,
) -> Result<PromptText, PromptError> {
    let step = match HopStep::try_from(step)? {
        HopStep::Polarity => return Err(PromptError::BadStep(3)),
        s => s,
    };
    require("context", &context.text)?;
    require("answer", answer)?;
    require("target", target)?;
    if context.step != step {
        return Err(PromptError::OutOfSequence {
            step: step.index() + 1,
            got: context.step.index(),
        });
    }
    Ok(PromptText(format!(
        "{} {answer} {REVISE_QUESTION_HEAD}{target}?",
        context.text
    )))
}
