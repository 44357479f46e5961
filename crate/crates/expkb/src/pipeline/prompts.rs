//! Versioned prompt assets. Each asset ships with the crate as a UTF-8 file
//! under `prompts/` and becomes the system message of exactly one reasoner
//! call kind, which is also how scripted reasoners key their responses.

/// Every reasoner call the engine can make.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PromptKind {
    /// Query to problem pattern and goal.
    Parse,
    /// Key-term extraction over the query.
    Reason,
    /// Cross-domain adaptation of one experience.
    Adapt,
    /// Trace plus adapted experiences to a numbered plan.
    Plan,
    /// Trajectory to per-step summaries and an overall paragraph.
    Summarize,
    /// Trajectory to logical-flaw findings.
    Analyze,
    /// Findings plus retrieved experiences to numbered suggestions.
    Refine,
    /// One plan step plus one suggestion to a merged instruction.
    Merge,
    /// Reserved for deployments that delegate ranking to the reasoner; the
    /// engine itself ranks algorithmically.
    Retrieve,
    GenerationGeneral,
    GenerationGaia,
    GenerationSwe,
}

impl PromptKind {
    pub const ALL: [PromptKind; 12] = [
        PromptKind::Parse,
        PromptKind::Reason,
        PromptKind::Adapt,
        PromptKind::Plan,
        PromptKind::Summarize,
        PromptKind::Analyze,
        PromptKind::Refine,
        PromptKind::Merge,
        PromptKind::Retrieve,
        PromptKind::GenerationGeneral,
        PromptKind::GenerationGaia,
        PromptKind::GenerationSwe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PromptKind::Parse => "parse",
            PromptKind::Reason => "reason",
            PromptKind::Adapt => "adapt",
            PromptKind::Plan => "plan",
            PromptKind::Summarize => "summarize",
            PromptKind::Analyze => "analyze",
            PromptKind::Refine => "refine",
            PromptKind::Merge => "merge",
            PromptKind::Retrieve => "retrieve",
            PromptKind::GenerationGeneral => "generation_general",
            PromptKind::GenerationGaia => "generation_gaia",
            PromptKind::GenerationSwe => "generation_swe",
        }
    }

    /// The asset text, embedded at compile time.
    pub fn asset(&self) -> &'static str {
        match self {
            PromptKind::Parse => include_str!("../../prompts/parse_v1.txt"),
            PromptKind::Reason => include_str!("../../prompts/reason_v1.txt"),
            PromptKind::Adapt => include_str!("../../prompts/adapt_v1.txt"),
            PromptKind::Plan => include_str!("../../prompts/plan_v1.txt"),
            PromptKind::Summarize => include_str!("../../prompts/summarize_v1.txt"),
            PromptKind::Analyze => include_str!("../../prompts/analyze_v1.txt"),
            PromptKind::Refine => include_str!("../../prompts/refine_v1.txt"),
            PromptKind::Merge => include_str!("../../prompts/merge_v1.txt"),
            PromptKind::Retrieve => include_str!("../../prompts/retrieve_v1.txt"),
            PromptKind::GenerationGeneral => {
                include_str!("../../prompts/generation_general_v1.txt")
            }
            PromptKind::GenerationGaia => include_str!("../../prompts/generation_gaia_v1.txt"),
            PromptKind::GenerationSwe => include_str!("../../prompts/generation_swe_v1.txt"),
        }
    }

    pub fn version(&self) -> &'static str {
        "v1"
    }

    pub fn from_name(name: &str) -> Option<PromptKind> {
        PromptKind::ALL.iter().copied().find(|k| k.name() == name)
    }

    /// Recovers the kind from a request's system message.
    pub fn from_system_text(text: &str) -> Option<PromptKind> {
        PromptKind::ALL.iter().copied().find(|k| k.asset() == text)
    }
}
