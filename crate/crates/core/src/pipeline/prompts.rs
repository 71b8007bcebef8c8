//! Stage prompts. Everything variable travels as input files, so prompts
//! depend only on stage, iteration and round.

use crate::model::StageName;

pub fn render(stage: StageName, iteration: u32, round: u32) -> String {
    let task = match stage {
        StageName::Locate => {
            "Read the batch evidence and the baseline keypoint matrix in the inputs. \
             Locate the harness code paths responsible for the weak and missing \
             keypoints. Reply in markdown with one section per finding, citing files."
        }
        StageName::Plan => {
            "Using the locate report (and the previous review, if any), write a \
             change plan in markdown. Target the architectural cause, not the \
             individual failing transcript."
        }
        StageName::PlanReview => {
            "Review the plan. Reply with JSON {\"decision\": \"approve\" | \
             \"reject_off_target\" | \"reject_too_narrow\", \"notes\": string}."
        }
        StageName::Implement => {
            "Implement the approved plan in the workspace. Leave your changes in \
             the working tree or commit them; they are squashed into one commit. \
             Reply with a markdown summary of what changed."
        }
        StageName::CodeReview => {
            "Review the diff against the approved plan. Reply with JSON \
             {\"decision\": \"approve\" | \"reject\", \"notes\": string}."
        }
        StageName::TaskEvaluate => {
            "Score every task's transcripts on its keypoints using the levels \
             missing, weak, adequate, strong. Use four to seven keypoints per task; \
             after the baseline, keep exactly the baseline's keypoints. Reply with \
             JSON {\"tasks\": {task_id: {keypoint: level}}}."
        }
        StageName::Verdict => {
            "Compare this iteration's keypoint matrix with the history in the \
             inputs. Reply with JSON {\"kind\": \"CONVERGED\" | \"NEED_MORE_WORK\" | \
             \"FUNDAMENTAL_LIMIT_MODEL\" | \"FUNDAMENTAL_LIMIT_ARCHITECTURE\", \
             \"rationale\": string}."
        }
    };
    format!("# Stage: {stage}\nIteration: {iteration}\nRound: {round}\n\n{task}\n")
}
