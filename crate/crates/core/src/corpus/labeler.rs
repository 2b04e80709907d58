use super::synth::SyntheticSpec;
use crate::topic::TopicLabels;

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Sets topic `i` iff one of topic `i`'s signature phrases occurs as a
/// contiguous token run in the report.
pub fn rule_label(tokens: &[String], spec: &SyntheticSpec) -> TopicLabels {
    let mut labels = TopicLabels::default();
    for (i, topic) in spec.topics.iter().enumerate() {
        if topic
            .signatures
            .iter()
            .any(|s| contains_phrase(tokens, &super::tokenize(s)))
        {
            labels.0[i] = 1;
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    #[test]
    fn basic_cases() {
        let spec = SyntheticSpec::default();
        assert_eq!(rule_label(&[], &spec), TopicLabels::default());
        let t = tokenize("there is a small pleural effusion . a healed rib fracture is identified .");
        let l = rule_label(&t, &spec);
        assert_eq!(l.active(), vec![10, 12]);
    }
}
