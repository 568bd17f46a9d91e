//! Decoding-based accuracy on held-out traces.

use serde::{Deserialize, Serialize};

use crate::data::{answer_token, GroundedTrace, TaskKind};
use crate::decode::{decode, DecodeConfig};
use crate::error::{input_err, Result};
use crate::model::Model;
use crate::pointer::{argmax, AugToken};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: usize,
    pub answer_correct: usize,
    pub answer_accuracy: f64,
    /// Gold pointer positions where the decoded token is the same pointer.
    pub ptr_correct: usize,
    pub ptr_total: usize,
    pub pointer_accuracy: f64,
    pub pointing: bool,
}

/// The answer read from a decode: the first emitted token of the task's
/// answer class, or else the best answer-class token of the final step.
pub fn read_answer(kind: TaskKind, tokens: &[AugToken], last_gen_logits: Option<&[f64]>) -> Option<u32> {
    let allowed = kind.answer_tokens();
    let emitted = tokens.iter().find_map(|t| match t {
        AugToken::Vocab(id) if allowed.contains(id) => Some(*id),
        _ => None,
    });
    emitted.or_else(|| {
        let gen = last_gen_logits?;
        let scores: Vec<f64> = allowed.iter().map(|&a| gen[a as usize]).collect();
        Some(allowed[argmax(&scores)])
    })
}

/// Per-trace outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceOutcome {
    pub tokens: Vec<AugToken>,
    pub answer: Option<u32>,
    pub gold: Option<u32>,
    pub ptr_correct: usize,
    pub ptr_total: usize,
}

pub fn evaluate_trace(model: &Model, trace: &GroundedTrace, cfg: &DecodeConfig) -> Result<TraceOutcome> {
    let Some(kind) = TaskKind::from_prompt(&trace.prompt) else {
        return input_err("prompt does not start with a task token");
    };
    let out = decode(model, &trace.prompt, &trace.patches, cfg, false)?;
    let last = out.step_logits.last().map(|l| l.gen.as_slice());
    let answer = read_answer(kind, &out.tokens, last);
    let (mut pc, mut pt) = (0, 0);
    for (i, g) in trace.target.iter().enumerate() {
        if g.is_ptr() {
            pt += 1;
            if out.tokens.get(i) == Some(g) {
                pc += 1;
            }
        }
    }
    Ok(TraceOutcome {
        tokens: out.tokens,
        answer,
        gold: answer_token(trace),
        ptr_correct: pc,
        ptr_total: pt,
    })
}

pub fn evaluate(model: &Model, data: &[GroundedTrace], cfg: &DecodeConfig) -> Result<EvalReport> {
    let mut r = EvalReport {
        pointing: cfg.pointing,
        ..Default::default()
    };
    for t in data {
        let o = evaluate_trace(model, t, cfg)?;
        r.tasks += 1;
        if o.answer.is_some() && o.answer == o.gold {
            r.answer_correct += 1;
        }
        r.ptr_correct += o.ptr_correct;
        r.ptr_total += o.ptr_total;
    }
    r.answer_accuracy = ratio(r.answer_correct, r.tasks);
    r.pointer_accuracy = ratio(r.ptr_correct, r.ptr_total);
    Ok(r)
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_task, SynthConfig, Vocab};
    use crate::model::ModelConfig;

    #[test]
    fn answer_readout() {
        let toks = [
            AugToken::Vocab(Vocab::REGION),
            AugToken::Ptr(3),
            AugToken::Vocab(Vocab::color(2)),
        ];
        assert_eq!(read_answer(TaskKind::Lookup, &toks, None), Some(Vocab::color(2)));
        let mut gen = vec![0.0; Vocab::SIZE];
        gen[Vocab::color(1) as usize] = 1.0;
        gen[Vocab::YES as usize] = 5.0;
        assert_eq!(
            read_answer(TaskKind::Lookup, &toks[..2], Some(&gen)),
            Some(Vocab::color(1))
        );
        assert_eq!(read_answer(TaskKind::Lookup, &toks[..2], None), None);
    }

    #[test]
    fn untrained_model_near_chance() {
        let m = Model::new(
            ModelConfig {
                dim: 16,
                heads: 2,
                ..Default::default()
            },
            8,
        )
        .unwrap();
        let data: Vec<GroundedTrace> = (0..500)
            .map(|s| synthesize_task(s, &SynthConfig::default(), TaskKind::Lookup).unwrap())
            .collect();
        let cfg = DecodeConfig {
            max_new: 4,
            ..Default::default()
        };
        let r = evaluate(&m, &data, &cfg).unwrap();
        assert_eq!(r.tasks, 500);
        assert_eq!(r.ptr_total, 500);
        assert!((r.answer_accuracy - 0.25).abs() <= 0.1, "{r:?}");
    }
}
