use crate::adaptation::AdaptError;
use crate::corpus::TaskRecord;
use crate::llm::Gateway;
use crate::prompts::{extract_tag, PromptSet};

use super::SelectionError;

const TAG: &str = "Input Template";

/// Renders the template-summary prompt over the task's first three inputs.
pub fn render_template_prompt(task: &TaskRecord, prompts: &PromptSet) -> Result<String, SelectionError> {
    if task.instances.len() < 3 {
        return Err(SelectionError::Insufficient {
            needed: 3,
            available: task.instances.len(),
        });
    }
    let i = &task.instances;
    prompts
        .render(
            "summarize_template",
            &[
                ("description", &task.description),
                ("input_1", &i[0].input),
                ("input_2", &i[1].input),
                ("input_3", &i[2].input),
            ],
        )
        .map_err(|e| AdaptError::from(e).into())
}

/// Asks the model for the task's input template. One retry on a missing
/// tag, as for the adaptation stages.
pub fn summarize_template(task: &TaskRecord, gateway: &Gateway, prompts: &PromptSet) -> Result<String, SelectionError> {
    let prompt = render_template_prompt(task, prompts)?;
    let mut raw = String::new();
    for _ in 0..2 {
        raw = gateway
            .complete("template", &prompt)
            .map_err(|source| AdaptError::Llm {
                stage: "template".into(),
                source,
            })?
            .text;
        match extract_tag(&raw, TAG) {
            Some(t) if !t.is_empty() => return Ok(t.to_string()),
            Some(_) => return Err(AdaptError::EmptyStage { stage: "template".into() }.into()),
            None => continue,
        }
    }
    Err(AdaptError::TagMissing {
        stage: "template".into(),
        tag: TAG.into(),
        raw,
    }
    .into())
}
