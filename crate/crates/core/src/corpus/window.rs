use super::{AnnotatedParagraph, RelationInstance, Span};
use crate::error::{Error, Result};

/// Drops every token outside `radius` tokens of some relation's mentions.
///
/// For each relation the kept window is
/// `[min(starts) − radius, max(ends) + radius)`, clamped to the paragraph;
/// the union over relations survives. Mentions are remapped onto the
/// surviving tokens and mentions with no surviving token are removed, with
/// relation indices renumbered to match.
pub fn window_truncate(p: &AnnotatedParagraph, radius: usize) -> Result<AnnotatedParagraph> {
    if p.relations.is_empty() {
        return Err(Error::invalid("window truncation needs at least one relation"));
    }
    let n = p.tokens.len();
    let mut keep = vec![false; n];
    for rel in &p.relations {
        let (a, b) = (p.mentions[rel.head], p.mentions[rel.tail]);
        let lo = a.start.min(b.start).saturating_sub(radius);
        let hi = (a.end.max(b.end) + radius).min(n);
        keep[lo..hi].iter_mut().for_each(|k| *k = true);
    }

    // kept_before[t] = number of kept tokens with index < t
    let mut kept_before = Vec::with_capacity(n + 1);
    let mut acc = 0;
    for &k in &keep {
        kept_before.push(acc);
        acc += usize::from(k);
    }
    kept_before.push(acc);

    let tokens = p
        .tokens
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(t, _)| t.clone())
        .collect();

    let mut new_index = vec![None; p.mentions.len()];
    let mut mentions = Vec::new();
    for (m, span) in p.mentions.iter().enumerate() {
        let remapped = Span::new(kept_before[span.start], kept_before[span.end]);
        if !remapped.is_empty() {
            new_index[m] = Some(mentions.len());
            mentions.push(remapped);
        }
    }

    let relations = p
        .relations
        .iter()
        .map(|r| {
            let head = new_index[r.head].expect("relation mentions lie inside their own window");
            let tail = new_index[r.tail].expect("relation mentions lie inside their own window");
            RelationInstance {
                head,
                tail,
                label: r.label.clone(),
            }
        })
        .collect();

    let out = AnnotatedParagraph {
        tokens,
        mentions,
        relations,
        domain: p.domain.clone(),
    };
    debug_assert!(out.validate().is_ok());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::para;
    use proptest::prelude::*;

    #[test]
    fn single_relation_window() {
        let p = para(20, &[(10, 11), (12, 13)], &[(0, 1, "R")]);
        let out = window_truncate(&p, 5).unwrap();
        let kept: Vec<String> = (5..=17).map(|i| format!("t{i}")).collect();
        assert_eq!(out.tokens, kept);
        assert_eq!(out.mentions, vec![Span::new(5, 6), Span::new(7, 8)]);
        assert_eq!(out.relations, p.relations);
    }

    // Oracle: enumerate covered indices per relation, then union.
    fn covered(p: &AnnotatedParagraph, radius: usize) -> Vec<usize> {
        let mut idx = std::collections::BTreeSet::new();
        for r in &p.relations {
            let spans = [p.mentions[r.head], p.mentions[r.tail]];
            for t in 0..p.tokens.len() {
                let lo = spans.iter().map(|s| s.start as i64).min().unwrap() - radius as i64;
                let hi = spans.iter().map(|s| s.end as i64).max().unwrap() + radius as i64;
                if (t as i64) >= lo && (t as i64) < hi {
                    idx.insert(t);
                }
            }
        }
        idx.into_iter().collect()
    }

    #[test]
    fn disjoint_relations_keep_two_ranges() {
        let p = para(
            40,
            &[(1, 2), (3, 4), (20, 21), (35, 36), (37, 39)],
            &[(0, 1, "R"), (3, 4, "S")],
        );
        let out = window_truncate(&p, 2).unwrap();
        let expect: Vec<String> = covered(&p, 2).iter().map(|i| format!("t{i}")).collect();
        assert_eq!(out.tokens, expect);
        // mention 2 (token 20) falls in the gap and is dropped
        assert_eq!(out.mentions.len(), 4);
        assert_eq!(out.relations[1].head, 2);
        assert_eq!(out.relations[1].tail, 3);
        assert_eq!(&out.tokens[out.mentions[3].start], "t37");
    }

    #[test]
    fn large_radius_is_identity() {
        let p = para(8, &[(2, 3), (5, 7)], &[(1, 0, "R")]);
        assert_eq!(window_truncate(&p, 100).unwrap(), p);
    }

    #[test]
    fn no_relations_is_rejected() {
        let p = para(8, &[(2, 3)], &[]);
        assert!(window_truncate(&p, 5).is_err());
    }

    proptest! {
        #[test]
        fn never_drops_covered_tokens(
            n in 12usize..50,
            starts in proptest::collection::vec(0usize..45, 2..6),
            radius in 0usize..7,
        ) {
            let spans: Vec<(usize, usize)> = starts.iter().map(|&s| (s % (n - 1), s % (n - 1) + 1)).collect();
            let rels: Vec<(usize, usize, &str)> = (1..spans.len()).map(|j| (0, j, "R")).collect();
            let p = para(n, &spans, &rels);
            let out = window_truncate(&p, radius).unwrap();
            let expect: Vec<String> = covered(&p, radius).iter().map(|i| format!("t{i}")).collect();
            prop_assert!(out.tokens.len() <= p.tokens.len());
            prop_assert_eq!(&out.tokens, &expect);
            prop_assert!(out.validate().is_ok());
            for (r_in, r_out) in p.relations.iter().zip(&out.relations) {
                let a = p.mentions[r_in.head];
                let b = out.mentions[r_out.head];
                prop_assert_eq!(&p.tokens[a.start..a.end], &out.tokens[b.start..b.end]);
            }
        }
    }
}
