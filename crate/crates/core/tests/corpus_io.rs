use std::collections::BTreeMap;

use aes_core::corpus::{
    builtin_prompt_table, load_dataset, split_dataset, write_dataset, CorpusError, EssayRecord, SplitPart,
};

const HEADER: &str = "essay_id\tessay_set\tessay\tdomain1_score\tcontent\torganization\tword_choice\tsentence_fluency\tconventions";

fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
    let p = dir.path().join("d.tsv");
    std::fs::write(&p, format!("{HEADER}\n{body}")).unwrap();
    p
}

#[test]
fn errors_carry_line_numbers() {
    let table = builtin_prompt_table();
    let dir = tempfile::tempdir().unwrap();
    let ok = "a\t1\tSome text.\t8\t3\t3\t3\t3\t3\n";

    let p = write(&dir, &format!("{ok}b\t1\tMore.\t99\t3\t3\t3\t3\t3\n"));
    match load_dataset(&p, &table).unwrap_err() {
        CorpusError::ScoreOutOfRange { line, field, value, .. } => {
            assert_eq!((line, field.as_str(), value), (3, "overall", 99));
        }
        e => panic!("unexpected {e}"),
    }

    let p = write(&dir, &format!("{ok}{ok}c\t42\tx\t1\t1\t1\t1\t1\t1\n"));
    assert!(matches!(
        load_dataset(&p, &table).unwrap_err(),
        CorpusError::UnknownPrompt { line: 4, prompt_id: 42 }
    ));

    let p = write(&dir, "d\t1\tshort row\t8\n");
    assert!(matches!(load_dataset(&p, &table).unwrap_err(), CorpusError::MalformedRow { line: 2, .. }));

    let p = write(&dir, "e\t1\tx\tten\t3\t3\t3\t3\t3\n");
    let err = load_dataset(&p, &table).unwrap_err();
    assert!(err.to_string().starts_with("line 2:"), "{err}");

    let missing = dir.path().join("absent.tsv");
    assert!(matches!(load_dataset(&missing, &table).unwrap_err(), CorpusError::Io { .. }));
}

#[test]
fn write_then_read_round_trips() {
    let table = builtin_prompt_table();
    let mut records = Vec::new();
    for (i, spec) in table.prompts().iter().enumerate() {
        let trait_scores: BTreeMap<String, i32> =
            spec.traits.iter().map(|t| (t.name.clone(), t.range.max())).collect();
        records.push(EssayRecord {
            essay_id: format!("e{i}"),
            prompt_id: spec.prompt_id,
            text: format!("Essay {i}, with \"quotes\" and a\ttab."),
            overall_score: spec.overall_range.min(),
            trait_scores,
        });
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.tsv");
    write_dataset(std::fs::File::create(&p).unwrap(), &table, &records).unwrap();
    assert_eq!(load_dataset(&p, &table).unwrap(), records);
}

#[test]
fn split_is_disjoint_and_covers_everything() {
    let table = builtin_prompt_table();
    let spec = table.get(3).unwrap();
    let records: Vec<EssayRecord> = (0..50)
        .map(|i| EssayRecord {
            essay_id: format!("r{i}"),
            prompt_id: 3,
            text: "t".into(),
            overall_score: spec.overall_range.min(),
            trait_scores: spec.traits.iter().map(|t| (t.name.clone(), t.range.min())).collect(),
        })
        .collect();
    let split = split_dataset(&records, (0.8, 0.1, 0.1), 7).unwrap();
    assert_eq!(split, split_dataset(&records, (0.8, 0.1, 0.1), 7).unwrap());
    let sizes: Vec<usize> = [SplitPart::Train, SplitPart::Dev, SplitPart::Test]
        .into_iter()
        .map(|p| split.select(&records, p).len())
        .collect();
    assert_eq!(sizes, [40, 5, 5]);
    let mut all: Vec<&String> = split.train.iter().chain(&split.dev).chain(&split.test).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 50);
}
