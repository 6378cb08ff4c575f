use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Conversation, Inventory, SpeakerLabels, Turn, Utterance};

/// One broken invariant: where it happened and which rule it violated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub conversation: String,
    pub turn: Option<usize>,
    pub rule: String,
    pub detail: String,
}

impl Diagnostic {
    pub fn new(conversation: &str, turn: Option<usize>, rule: &str, detail: impl Into<String>) -> Self {
        Self {
            conversation: conversation.to_string(),
            turn,
            rule: rule.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "conversation {}", self.conversation)?;
        if let Some(t) = self.turn {
            write!(f, " turn {t}")?;
        }
        write!(f, ": {}", self.rule)?;
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

pub struct ValidationRules<'a> {
    pub inventory: &'a Inventory,
    pub speakers: &'a SpeakerLabels,
    /// Agent turns must reference audio (training corpora); scripts skip this.
    pub require_agent_audio: bool,
}

pub fn validate_conversation(conv: &Conversation, rules: &ValidationRules<'_>) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    if conv.turns.is_empty() {
        out.push(Diagnostic::new(&conv.id, None, "turns_non_empty", "conversation has no turns"));
    }
    for (pos, turn) in conv.turns.iter().enumerate() {
        if turn.index != pos {
            out.push(Diagnostic::new(
                &conv.id,
                Some(turn.index),
                "turn_index_contiguous",
                format!("expected index {pos}"),
            ));
        }
        validate_turn(&conv.id, turn, rules, &mut out);
    }
    out
}

fn validate_turn(conv: &str, turn: &Turn, rules: &ValidationRules<'_>, out: &mut Vec<Diagnostic>) {
    let at = Some(turn.index);
    let mut push = |rule: &str, detail: String| out.push(Diagnostic::new(conv, at, rule, detail));

    if rules.speakers.scalar(&turn.speaker).is_none() {
        push("speaker_label", format!("unknown speaker {:?}", turn.speaker));
    }
    if rules.require_agent_audio && rules.speakers.is_agent(&turn.speaker) && turn.audio_path.is_none() {
        push("audio_required", "agent turn without audio".into());
    }
    validate_utterance(&turn.utterance, rules.inventory, &mut push);
}

fn validate_utterance(u: &Utterance, inventory: &Inventory, push: &mut impl FnMut(&str, String)) {
    let n_chars = u.num_chars();
    let n_ph = u.phonemes.len();

    // sentence spans must tile [0, n_chars) exactly
    let mut cursor = 0;
    let mut tiled = !u.sentence_spans.is_empty() || n_chars == 0;
    for s in &u.sentence_spans {
        if s.start != cursor || s.end <= s.start {
            tiled = false;
            break;
        }
        cursor = s.end;
    }
    if !tiled || cursor != n_chars {
        push(
            "sentence_spans_partition",
            format!("spans {:?} do not partition 0..{n_chars}", spans_str(&u.sentence_spans)),
        );
    }

    if u.char_alignment.len() != n_chars {
        push(
            "char_alignment_count",
            format!("{} ranges for {n_chars} characters", u.char_alignment.len()),
        );
    }
    let mut prev_end = 0;
    for (c, span) in u.char_alignment.iter().enumerate() {
        if span.end < span.start || span.start < prev_end {
            push("char_alignment_order", format!("character {c} range {:?}", (span.start, span.end)));
        }
        if span.end > n_ph {
            push("char_alignment_range", format!("character {c} range ends at {} > {n_ph}", span.end));
        }
        prev_end = prev_end.max(span.end);
    }

    for (i, p) in u.phonemes.iter().enumerate() {
        if !inventory.contains(p) {
            push("unknown_symbol", format!("{p:?} at position {i}"));
        }
    }

    for a in &u.annotations {
        let s = a.char_span;
        if s.end < s.start || s.end > n_chars || (s.start >= n_chars && !s.is_empty()) {
            push("annotation_span", format!("{} span {:?} outside text", a.kind, (s.start, s.end)));
            continue;
        }
        let inside = u.sentence_spans.iter().any(|sent| sent.contains_span(&s));
        let at_boundary = s.is_empty()
            && (s.start == 0 || u.sentence_spans.iter().any(|sent| sent.end == s.start));
        if !(if s.is_empty() { at_boundary || inside } else { inside }) {
            push(
                "annotation_containment",
                format!("{} span {:?} crosses a sentence boundary", a.kind, (s.start, s.end)),
            );
        }
    }
}

fn spans_str(spans: &[super::Span]) -> Vec<(usize, usize)> {
    spans.iter().map(|s| (s.start, s.end)).collect()
}

#[cfg(test)]
mod tests {
    use super::super::{AnnotationKind, Span, SpontaneousAnnotation};
    use super::*;

    fn inventory() -> Inventory {
        Inventory::new(["b", "a", "d", "u", ".", "#"])
    }

    fn turn(index: usize, speaker: &str) -> Turn {
        Turn {
            index,
            speaker: speaker.into(),
            utterance: Utterance {
                text: "BD.".into(),
                sentence_spans: vec![Span::new(0, 3)],
                phonemes: ["b", "a", "d", "u", "."].map(String::from).to_vec(),
                char_alignment: vec![Span::new(0, 2), Span::new(2, 4), Span::new(4, 5)],
                annotations: vec![],
            },
            audio_path: Some("x.wav".into()),
        }
    }

    fn check(conv: &Conversation, inv: &Inventory) -> Vec<Diagnostic> {
        let speakers = SpeakerLabels::default();
        validate_conversation(
            conv,
            &ValidationRules {
                inventory: inv,
                speakers: &speakers,
                require_agent_audio: true,
            },
        )
    }

    fn rules_of(d: &[Diagnostic]) -> Vec<&str> {
        d.iter().map(|d| d.rule.as_str()).collect()
    }

    #[test]
    fn well_formed_single_turn() {
        let conv = Conversation {
            id: "c".into(),
            turns: vec![turn(0, "agent")],
        };
        assert!(check(&conv, &inventory()).is_empty());
    }

    #[test]
    fn gap_in_sentence_spans() {
        let mut t = turn(0, "agent");
        t.utterance.sentence_spans = vec![Span::new(0, 1), Span::new(2, 3)];
        let conv = Conversation {
            id: "c".into(),
            turns: vec![t],
        };
        let d = check(&conv, &inventory());
        assert_eq!(rules_of(&d), vec!["sentence_spans_partition"]);
        assert_eq!(d[0].conversation, "c");
        assert_eq!(d[0].turn, Some(0));
    }

    #[test]
    fn removing_a_symbol_flags_it() {
        let conv = Conversation {
            id: "c".into(),
            turns: vec![turn(0, "agent")],
        };
        let inv = inventory().without("d");
        let d = check(&conv, &inv);
        assert_eq!(rules_of(&d), vec!["unknown_symbol"]);
        assert!(d[0].detail.contains("\"d\""));
    }

    #[test]
    fn structural_violations() {
        let mut bad = turn(3, "robot");
        bad.audio_path = None;
        let mut agent = turn(1, "agent");
        agent.audio_path = None;
        agent.utterance.char_alignment = vec![Span::new(0, 2), Span::new(1, 4), Span::new(4, 9)];
        let conv = Conversation {
            id: "c".into(),
            turns: vec![turn(0, "customer"), agent, bad],
        };
        let rules = rules_of(&check(&conv, &inventory()))
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        for expected in [
            "audio_required",
            "char_alignment_order",
            "char_alignment_range",
            "turn_index_contiguous",
            "speaker_label",
        ] {
            assert!(rules.iter().any(|r| r == expected), "missing {expected} in {rules:?}");
        }
        let empty = Conversation {
            id: "e".into(),
            turns: vec![],
        };
        assert_eq!(rules_of(&check(&empty, &inventory())), vec!["turns_non_empty"]);
    }

    #[test]
    fn annotation_rules() {
        let mut t = turn(0, "agent");
        t.utterance.text = "BD.BD.".into();
        t.utterance.sentence_spans = vec![Span::new(0, 3), Span::new(3, 6)];
        t.utterance.phonemes.extend(["b", "a", "d", "u", "."].map(String::from));
        t.utterance.char_alignment.extend([Span::new(5, 7), Span::new(7, 9), Span::new(9, 10)]);
        let conv_with = |annotations: Vec<SpontaneousAnnotation>| {
            let mut t = t.clone();
            t.utterance.annotations = annotations;
            Conversation {
                id: "a".into(),
                turns: vec![t],
            }
        };
        let ann = |kind, s, e| SpontaneousAnnotation {
            kind,
            char_span: Span::new(s, e),
        };
        assert!(check(&conv_with(vec![ann(AnnotationKind::Filler, 0, 2)]), &inventory()).is_empty());
        assert!(check(&conv_with(vec![ann(AnnotationKind::HesitationPause, 3, 3)]), &inventory()).is_empty());
        assert_eq!(
            rules_of(&check(&conv_with(vec![ann(AnnotationKind::Repeat, 2, 4)]), &inventory())),
            vec!["annotation_containment"]
        );
        assert_eq!(
            rules_of(&check(&conv_with(vec![ann(AnnotationKind::FalseStart, 4, 9)]), &inventory())),
            vec!["annotation_span"]
        );
    }
}
