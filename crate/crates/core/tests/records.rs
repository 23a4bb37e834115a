use curate_core::jsonl::{self, read_all, ReadMode};
use curate_core::record::{validate_dataset, validate_record, ImageRef, InstructionRecord, OcrLine, PairKind, QAPair};
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 ,.?'\"\\\\é\n]{1,40}".prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn record() -> impl Strategy<Value = InstructionRecord> {
    let ocr = prop::collection::vec((text(), 0.0..=1.0f64, 0.0..500.0f64), 0..4);
    let pairs = prop::collection::vec((text(), text(), any::<bool>()), 0..4);
    ("[a-z0-9_]{1,12}", text(), ocr, pairs, prop::option::of(text())).prop_map(|(id, caption, ocr, pairs, enriched)| {
        let mut r = InstructionRecord::new(
            ImageRef::new(id.clone(), format!("images/{id}.png")),
            caption,
            ocr.into_iter()
                .map(|(t, c, x)| OcrLine::new([[x, 0.0], [x + 1.0, 0.0], [x + 1.0, 2.0], [x, 2.0]], t, c))
                .collect(),
        );
        r.enriched_caption = enriched;
        for (q, a, explain) in pairs {
            let src = QAPair::extractive(q.clone(), a.clone());
            if r.pair(&src.pair_id).is_some() {
                continue;
            }
            let exp = QAPair::self_explain(format!("why {a}"), format!("because {q}"), &src);
            r.pairs.push(src);
            if explain && r.pair(&exp.pair_id).is_none() {
                r.pairs.push(exp);
            }
        }
        r
    })
}

proptest! {
    #[test]
    fn jsonl_round_trip(records in prop::collection::vec(record(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        jsonl::write_jsonl(&records, &path).unwrap();
        let back = jsonl::read_records(&path).unwrap();
        prop_assert_eq!(&back, &records);
        // Writing again is byte-stable.
        let again = dir.path().join("again.jsonl");
        jsonl::write_jsonl(&back, &again).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    }

    #[test]
    fn generated_records_are_valid(r in record()) {
        prop_assert!(validate_record(&r).is_empty(), "{:?}", validate_record(&r));
    }

    #[test]
    fn pair_ids_depend_only_on_content(q in text(), a in text()) {
        prop_assert_eq!(QAPair::extractive(q.clone(), a.clone()).pair_id, QAPair::extractive(q.clone(), a.clone()).pair_id);
        prop_assert_ne!(QAPair::extractive(q.clone(), a.clone()).pair_id, QAPair::caption(q, a).pair_id);
    }
}

#[test]
fn invariant_violations_are_reported() {
    let mut r = InstructionRecord::new(ImageRef::new("", "x.png"), "c", vec![OcrLine::new(
        [[-1.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
        "T",
        1.5,
    )]);
    let src = QAPair::extractive("q", "a");
    let orphan = QAPair::self_explain("w", "b", &src);
    let mut bad_link = QAPair::extractive("q2", "a2");
    bad_link.explains = Some(src.pair_id.clone());
    r.pairs = vec![orphan, bad_link, QAPair::caption(" ", "x")];
    let rules: Vec<String> = validate_record(&r).iter().map(|v| v.rule.clone()).collect();
    for want in [
        "empty",
        "confidence out of range",
        "negative or non-finite bbox coordinate",
        "empty question",
        "explains set on non-self-explain pair",
    ] {
        assert!(rules.iter().any(|r| r == want), "missing {want}: {rules:?}");
    }
    assert!(rules.iter().any(|r| r.contains("not found")), "{rules:?}");
}

#[test]
fn duplicate_image_ids_are_a_dataset_violation() {
    let a = InstructionRecord::new(ImageRef::new("same", "a.png"), "c", vec![]);
    let b = InstructionRecord::new(ImageRef::new("same", "b.png"), "c", vec![]);
    assert!(!validate_dataset(&[a, b]).is_empty());
}

#[test]
fn lenient_reads_skip_torn_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.jsonl");
    let mut r = InstructionRecord::new(ImageRef::new("one", "1.png"), "c", vec![]);
    r.pairs.push(QAPair::extractive("q", "a"));
    jsonl::write_jsonl(&[r.clone()], &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.extend_from_slice(b"{\"image\": {\"id\"");
    std::fs::write(&path, bytes).unwrap();
    assert!(jsonl::read_records(&path).is_err());
    let (ok, bad) = read_all::<InstructionRecord>(&path, ReadMode::Lenient).unwrap();
    assert_eq!(ok, vec![r]);
    assert_eq!(bad.len(), 1);
    assert_eq!(ok[0].pairs[0].kind, PairKind::Extractive);
}
