use groundeval::metrics::{aggregate, judge_field, FieldCase, FieldJudgement};
use groundeval::normalize::Normalizer;
use groundeval::{BBox, ScoringConfig, ValueKind, Regime};
use proptest::prelude::*;

const VALUES: [&str; 3] = ["alpha", "beta", "gamma"];

/// Box on a 1/100 grid, as integer corners.
type IBox = [i64; 4];

#[derive(Debug, Clone)]
struct Case {
    gt: Option<(usize, IBox)>,
    pred_value: Option<usize>,
    pred_box: Option<IBox>,
}

fn ibox() -> impl Strategy<Value = IBox> {
    (0i64..100, 0i64..100, 1i64..=40, 1i64..=40)
        .prop_map(|(x, y, w, h)| [x, y, (x + w).min(100), (y + h).min(100)])
        .prop_filter("non-degenerate", |b| b[2] > b[0] && b[3] > b[1])
}

fn case() -> impl Strategy<Value = Case> {
    (
        proptest::option::weighted(0.8, (0usize..3, ibox())),
        proptest::option::weighted(0.8, 0usize..3),
        proptest::option::weighted(0.7, ibox()),
    )
        .prop_map(|(gt, pred_value, pred_box)| Case { gt, pred_value, pred_box })
}

fn to_bbox(b: IBox) -> BBox {
    BBox::new(b[0] as f64 / 100.0, b[1] as f64 / 100.0, b[2] as f64 / 100.0, b[3] as f64 / 100.0).unwrap()
}

fn area(b: IBox) -> i64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

fn inter(a: IBox, b: IBox) -> i64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    w * h
}

#[derive(Debug, Default, PartialEq, Eq)]
struct Oracle {
    fields: usize,
    value_correct: usize,
    strict: usize,
    audit: usize,
    boxes: usize,
    hits: usize,
}

const DOC: usize = 5;

fn oracle(cases: &[Case]) -> Option<Oracle> {
    let mut o = Oracle::default();
    for (i, c) in cases.iter().enumerate() {
        let doc = i / DOC;
        let doc_regions: Vec<IBox> = cases[doc * DOC..((doc + 1) * DOC).min(cases.len())]
            .iter()
            .filter_map(|c| c.gt.map(|g| g.1))
            .collect();
        o.fields += 1;
        let correct = match c.gt {
            None => c.pred_value.is_none(),
            Some((v, _)) => c.pred_value == Some(v),
        };
        o.value_correct += usize::from(correct);
        if let Some(p) = c.pred_box {
            o.boxes += 1;
            o.hits += usize::from(doc_regions.iter().any(|r| inter(p, *r) > 0));
        }
        match (c.gt, c.pred_box) {
            (None, b) => {
                let ok = correct && b.is_none();
                o.strict += usize::from(ok);
                o.audit += usize::from(ok);
            }
            (Some(_), None) => {}
            (Some((_, r)), Some(p)) => {
                let i = inter(p, r);
                let union = area(p) + area(r) - i;
                // Exact threshold ties are left to float rounding; skip them.
                if 2 * i == union || 2 * i == area(p) {
                    return None;
                }
                o.strict += usize::from(correct && 2 * i > union);
                o.audit += usize::from(correct && 2 * i > area(p));
            }
        }
    }
    Some(o)
}

fn judge_all(cases: &[Case], cfg: &ScoringConfig) -> Vec<FieldJudgement> {
    let norm = Normalizer::default();
    let regions: Vec<Option<BBox>> = cases.iter().map(|c| c.gt.map(|g| to_bbox(g.1))).collect();
    let doc_ids: Vec<String> = (0..cases.len()).map(|i| format!("d{}", i / DOC)).collect();
    let field_ids: Vec<String> = (0..cases.len()).map(|i| format!("f{}", i % DOC)).collect();
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let doc = i / DOC;
            let doc_regions: Vec<BBox> = regions[doc * DOC..((doc + 1) * DOC).min(cases.len())]
                .iter()
                .flatten()
                .copied()
                .collect();
            let gt_regions: Vec<BBox> = regions[i].into_iter().collect();
            let case = FieldCase {
                model_id: "m",
                doc_id: &doc_ids[i],
                field_id: &field_ids[i],
                kind: ValueKind::Text,
                unit_lexicon: None,
                pred_value: c.pred_value.map(|v| VALUES[v]),
                pred_box: c.pred_box.map(to_bbox),
                parse_failed: false,
                gt_value: c.gt.map(|g| VALUES[g.0]),
                gt_regions: &gt_regions,
                doc_regions: &doc_regions,
            };
            judge_field(&case, cfg, &norm)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn aggregate_matches_brute_force_recount(cases in proptest::collection::vec(case(), 1..120)) {
        let Some(want) = oracle(&cases) else { return Ok(()) };
        let cfg = ScoringConfig::default();
        let js = judge_all(&cases, &cfg);
        let s = aggregate(&js, "m", Regime::ZeroShot, &cfg).unwrap();
        let c = s.counts;
        prop_assert_eq!(
            (c.fields, c.value_correct, c.strict_ok, c.audit_ok, c.boxes, c.evidence_hits),
            (want.fields, want.value_correct, want.strict, want.audit, want.boxes, want.hits)
        );
        let n = want.fields as f64;
        prop_assert_eq!(s.reading_acc, want.value_correct as f64 / n);
        prop_assert_eq!(s.strict_safety, want.strict as f64 / n);
        prop_assert_eq!(s.audit_precision, want.audit as f64 / n);
        prop_assert_eq!(s.bbox_coverage, want.boxes as f64 / n);
        if want.boxes > 0 {
            prop_assert_eq!(s.evidence_precision, want.hits as f64 / want.boxes as f64);
        }
        prop_assert_eq!(s.has_boxes, want.boxes > 0);
        prop_assert_eq!(s.failure_histogram.values().sum::<usize>(), want.fields);
        prop_assert!(s.strict_safety <= s.audit_precision);
        prop_assert!(s.audit_precision <= s.reading_acc);
    }

    #[test]
    fn stricter_iou_never_raises_strict_safety(
        cases in proptest::collection::vec(case(), 1..80),
        lo in 0.05f64..0.9,
        step in 0.0f64..0.1,
    ) {
        let hi = (lo + step).min(0.99);
        let score = |t: f64| {
            let cfg = ScoringConfig { iou_thresh: t, iop_thresh: t, ..ScoringConfig::default() };
            aggregate(&judge_all(&cases, &cfg), "m", Regime::ZeroShot, &cfg).unwrap()
        };
        let (a, b) = (score(lo), score(hi));
        prop_assert!(b.strict_safety <= a.strict_safety);
        prop_assert!(b.audit_precision <= a.audit_precision);
        prop_assert_eq!(a.reading_acc, b.reading_acc);
        prop_assert_eq!(a.bbox_coverage, b.bbox_coverage);
    }
}

#[test]
fn mixed_models_are_rejected() {
    let cases = vec![Case { gt: None, pred_value: None, pred_box: None }; 2];
    let cfg = ScoringConfig::default();
    let mut js = judge_all(&cases, &cfg);
    js[1].model_id = "other".into();
    assert!(aggregate(&js, "m", Regime::ZeroShot, &cfg).is_err());
    assert!(aggregate(&[], "m", Regime::ZeroShot, &cfg).is_err());
}
