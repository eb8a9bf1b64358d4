use std::collections::BTreeMap;

use super::instance::{DataError, EventInstance, Span};
use super::ontology::{EventSchema, Ontology};

pub const SEP_OPEN: &str = "<s>";
pub const SEP_CLOSE: &str = "</s>";
pub const EOS: &str = "[EOS]";
pub const TRIGGER_OPEN: &str = "<t>";
pub const TRIGGER_CLOSE: &str = "</t>";
/// Renders a role with no argument.
pub const ABSENT: &str = "∅";
pub const SLOT_SEP: &str = ":";
pub const SLOT_END: &str = ";";

/// Model-ready token sequences for one event of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Formatted {
    /// `<s> P </s> context [EOS]`
    pub input: Vec<String>,
    /// Filled template, without a trailing end token.
    pub target: Vec<String>,
    pub prompt: Vec<String>,
    /// Document tokens with the trigger wrapped in `<t> … </t>`.
    pub context: Vec<String>,
}

/// The unfilled template: each slot shows its role name.
pub fn prompt_tokens(schema: &EventSchema) -> Vec<String> {
    schema.render(|role| vec![role.to_string()])
}

/// The template with every slot rendered as `role : value ;`.
pub fn target_tokens(schema: &EventSchema, values: &BTreeMap<String, Vec<String>>) -> Vec<String> {
    schema.render(|role| {
        let mut out = vec![role.to_string(), SLOT_SEP.to_string()];
        match values.get(role) {
            Some(v) if !v.is_empty() => out.extend(v.iter().cloned()),
            _ => out.push(ABSENT.to_string()),
        }
        out.push(SLOT_END.to_string());
        out
    })
}

pub fn mark_trigger(tokens: &[String], trigger: Span) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.extend_from_slice(&tokens[..trigger.start]);
    out.push(TRIGGER_OPEN.to_string());
    out.extend_from_slice(&tokens[trigger.start..trigger.end]);
    out.push(TRIGGER_CLOSE.to_string());
    out.extend_from_slice(&tokens[trigger.end..]);
    out
}

pub fn format_instance(inst: &EventInstance, event_index: usize, ontology: &Ontology) -> Result<Formatted, DataError> {
    let ev = inst.event(event_index)?;
    let schema = ontology
        .schema(&ev.event_type)
        .ok_or_else(|| DataError::UnknownType(ev.event_type.clone()))?;
    let prompt = prompt_tokens(schema);
    let context = mark_trigger(&inst.tokens, ev.trigger);
    let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for a in &ev.arguments {
        values
            .entry(a.role.clone())
            .or_insert_with(|| inst.tokens[a.start..a.end].to_vec());
    }
    let target = target_tokens(schema, &values);
    let mut input = Vec::with_capacity(prompt.len() + context.len() + 3);
    input.push(SEP_OPEN.to_string());
    input.extend(prompt.iter().cloned());
    input.push(SEP_CLOSE.to_string());
    input.extend(context.iter().cloned());
    input.push(EOS.to_string());
    Ok(Formatted {
        input,
        target,
        prompt,
        context,
    })
}

/// `<s> candidate </s> <s> prompt </s> context [EOS]`, truncated to
/// `max_len` by dropping context from the tail. The prompt is never cut; the
/// candidate is cut only when prompt and delimiters alone do not fit.
pub fn build_prefix_input(candidate: &[String], prompt: &[String], context: &[String], max_len: usize) -> Vec<String> {
    const DELIMITERS: usize = 5;
    let fixed = prompt.len() + DELIMITERS;
    let cand_len = candidate.len().min(max_len.saturating_sub(fixed));
    let ctx_len = context.len().min(max_len.saturating_sub(fixed + cand_len));
    let mut out = Vec::with_capacity(fixed + cand_len + ctx_len);
    out.push(SEP_OPEN.to_string());
    out.extend_from_slice(&candidate[..cand_len]);
    out.push(SEP_CLOSE.to_string());
    out.push(SEP_OPEN.to_string());
    out.extend_from_slice(prompt);
    out.push(SEP_CLOSE.to_string());
    out.extend_from_slice(&context[..ctx_len]);
    out.push(EOS.to_string());
    out
}

/// Reads `role : value ;` slots left to right. Any role of the event type
/// followed by `:` opens a slot that runs to the next `;`; only the first
/// slot per role is kept. An unterminated slot ends parsing. Roles never
/// seen, or filled with `∅`, map to the empty string.
pub fn parse_prediction(tokens: &[String], ontology: &Ontology, event_type: &str) -> BTreeMap<String, String> {
    let Some(schema) = ontology.schema(event_type) else {
        return BTreeMap::new();
    };
    let mut out: BTreeMap<String, String> = schema.roles.iter().map(|r| (r.clone(), String::new())).collect();
    let mut filled: Vec<&str> = Vec::new();
    let end = tokens.iter().position(|t| t == EOS).unwrap_or(tokens.len());
    let tokens = &tokens[..end];
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i].as_str();
        let is_role = schema.roles.iter().any(|r| r == tok);
        if is_role && tokens.get(i + 1).map(String::as_str) == Some(SLOT_SEP) {
            let Some(rel) = tokens[i + 2..].iter().position(|t| t == SLOT_END) else {
                break;
            };
            let value = &tokens[i + 2..i + 2 + rel];
            if !filled.contains(&tok) {
                filled.push(tok);
                if !(value.is_empty() || value.len() == 1 && value[0] == ABSENT) {
                    out.insert(tok.to_string(), value.join(" "));
                }
            }
            i += 3 + rel;
        } else {
            i += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::instance::{Argument, Event};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn attack_ontology() -> Ontology {
        let mut ont = Ontology::default();
        ont.types.insert(
            "attack".into(),
            EventSchema {
                roles: toks("attacker target instrument place"),
                template: "{attacker} attacked {target} using {instrument} at {place}".into(),
            },
        );
        ont
    }

    fn doc() -> EventInstance {
        EventInstance {
            doc_id: "d1".into(),
            tokens: toks("police said kovac stabbed a guard with a kitchen knife ."),
            events: vec![Event {
                event_type: "attack".into(),
                trigger: Span::new(3, 4),
                arguments: vec![
                    Argument { role: "attacker".into(), start: 2, end: 3 },
                    Argument { role: "instrument".into(), start: 8, end: 10 },
                ],
            }],
        }
    }

    #[test]
    fn figure_one_style_target() {
        let f = format_instance(&doc(), 0, &attack_ontology()).unwrap();
        assert_eq!(
            f.target.join(" "),
            "attacker : kovac ; attacked target : ∅ ; using instrument : kitchen knife ; at place : ∅ ;"
        );
        assert_eq!(
            f.input.join(" "),
            "<s> attacker attacked target using instrument at place </s> police said kovac <t> stabbed </t> a guard with a kitchen knife . [EOS]"
        );
    }

    #[test]
    fn no_arguments_gives_all_absent() {
        let mut d = doc();
        d.events[0].arguments.clear();
        let f = format_instance(&d, 0, &attack_ontology()).unwrap();
        assert_eq!(f.target.iter().filter(|t| *t == ABSENT).count(), 4);
        assert!(format_instance(&d, 1, &attack_ontology()).is_err());
    }

    #[test]
    fn parse_inverts_format() {
        let ont = attack_ontology();
        let f = format_instance(&doc(), 0, &ont).unwrap();
        let parsed = parse_prediction(&f.target, &ont, "attack");
        assert_eq!(parsed["attacker"], "kovac");
        assert_eq!(parsed["instrument"], "kitchen knife");
        assert_eq!(parsed["target"], "");
        assert_eq!(parsed["place"], "");
        assert!(parse_prediction(&[], &ont, "attack").values().all(String::is_empty));
    }

    #[test]
    fn parse_stops_at_unterminated_slot() {
        let ont = attack_ontology();
        let p = parse_prediction(&toks("attacker : kovac ; target : bemir instrument : knife"), &ont, "attack");
        assert_eq!(p["attacker"], "kovac");
        assert_eq!(p["target"], "");
        assert_eq!(p["instrument"], "");
    }

    #[test]
    fn prefix_input_layout_and_truncation() {
        let cand = toks("a b c");
        let prompt = toks("x attacked y");
        let ctx = toks("w1 w2 w3 w4");
        let full = build_prefix_input(&cand, &prompt, &ctx, 100);
        assert_eq!(full.join(" "), "<s> a b c </s> <s> x attacked y </s> w1 w2 w3 w4 [EOS]");
        assert_eq!(full.len(), 3 + 3 + 4 + 5);
        let cut = build_prefix_input(&cand, &prompt, &ctx, 13);
        assert_eq!(cut.join(" "), "<s> a b c </s> <s> x attacked y </s> w1 w2 [EOS]");
        let empty = build_prefix_input(&[], &prompt, &ctx, 100);
        assert_eq!(empty.join(" "), "<s> </s> <s> x attacked y </s> w1 w2 w3 w4 [EOS]");
    }
}
