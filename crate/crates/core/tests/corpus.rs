use std::io::Cursor;

use grit_core::locgrid::GridSpec;
use grit_core::markup::{extract_links, parse, render_box_group};
use grit_core::pipeline::io::{build_corpus, stats_from_jsonl, BuildSummary, GritLine};
use grit_core::pipeline::BuildConfig;
use grit_core::prompts::{instruction_examples, phrase_grounding_prompt, PromptTemplate, PREAMBLE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 6] = ["dog", "cat", "kite", "bench", "tree", "time"];

/// "the X near a Y": det/ROOT/prep/det/pobj, two chunks.
fn corpus(n: usize, seed: u64) -> (String, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut parses, mut dets) = (String::new(), String::new());
    for i in 0..n {
        let x = WORDS[rng.random_range(0..WORDS.len())];
        let y = WORDS[rng.random_range(0..WORDS.len())];
        parses.push_str(&format!(
            r#"{{"image_id":"im{i}","width":640,"height":480,"caption":"the {x} near a {y}","tokens":[{{"text":"the","head":1,"dep":"det"}},{{"text":"{x}","head":1,"dep":"ROOT"}},{{"text":"near","head":1,"dep":"prep"}},{{"text":"a","head":4,"dep":"det"}},{{"text":"{y}","head":2,"dep":"pobj"}}],"chunks":[{{"start":0,"end":2,"head":1}},{{"start":3,"end":5,"head":4}}],"shard":{}}}"#,
            i % 3
        ));
        parses.push('\n');
        let entries: Vec<String> = (0..rng.random_range(0..4))
            .map(|_| {
                let (x1, y1) = (rng.random_range(0.0..500.0), rng.random_range(0.0..380.0));
                format!(
                    r#"{{"chunk_index":{},"box":[{x1},{y1},{},{}],"score":{}}}"#,
                    rng.random_range(0..2),
                    x1 + rng.random_range(1.0..140.0),
                    y1 + rng.random_range(1.0..100.0),
                    rng.random_range(0.4..1.0)
                )
            })
            .collect();
        dets.push_str(&format!(
            r#"{{"image_id":"im{i}","detections":[{}]}}"#,
            entries.join(",")
        ));
        dets.push('\n');
    }
    (parses, dets)
}

fn build(parses: &str, dets: &str, workers: usize) -> (String, String, BuildSummary) {
    let (mut out, mut rej) = (Vec::new(), Vec::new());
    let s = build_corpus(
        Cursor::new(parses),
        Cursor::new(dets),
        &mut out,
        &mut rej,
        &BuildConfig::default(),
        workers,
    )
    .unwrap();
    (String::from_utf8(out).unwrap(), String::from_utf8(rej).unwrap(), s)
}

#[test]
fn worker_count_does_not_change_output() {
    let (p, d) = corpus(9000, 1);
    let single = build(&p, &d, 1);
    let many = build(&p, &d, 4);
    assert_eq!(single.0, many.0);
    assert_eq!(single.2, many.2);
    assert!(single.1.is_empty());
    assert_eq!(single.2.pairs, 9000);
    assert_eq!(single.2.written + single.2.discarded, 9000);
    assert!(single.2.written > 1000);
}

#[test]
fn records_are_well_formed_and_stats_agree() {
    let (p, d) = corpus(500, 2);
    let (out, _, summary) = build(&p, &d, 1);
    let (stats, rejects) = stats_from_jsonl(Cursor::new(out.as_str())).unwrap();
    assert!(rejects.is_empty());
    assert_eq!(stats, summary.stats);

    let g = GridSpec::default();
    for line in out.lines() {
        let rec: GritLine = serde_json::from_str(line).unwrap();
        assert!(rec.extra.contains_key("shard"), "passthrough field lost: {line}");
        assert!(rec.grounded_text.starts_with("<grounding> "));
        let doc = parse(&rec.grounded_text, g).unwrap();
        assert_eq!(doc.caption, rec.caption);
        assert_eq!(doc.links.len(), rec.refs.len());
        for (link, r) in doc.links.iter().zip(&rec.refs) {
            assert_eq!(link.span.text, r.text);
            assert_eq!(link.boxes.len(), r.boxes.len());
            // the stoplisted head never carries a ref on its own
            assert_ne!(r.text, "a time");

            // before any earlier link, prompt plus box group is a piece of the record
            if link.span.start < doc.links[0].span.end {
                let prompt = phrase_grounding_prompt(&doc.caption, &link.span).unwrap();
                let fragment = format!(
                    "{}{}",
                    prompt.strip_prefix(PREAMBLE).unwrap(),
                    render_box_group(&link.boxes)
                );
                assert!(
                    rec.grounded_text.contains(&fragment),
                    "{fragment} not in {}",
                    rec.grounded_text
                );
            }
        }
    }
}

#[test]
fn instruction_pairs_parse_and_repeat() {
    let (p, d) = corpus(200, 3);
    let (out, _, _) = build(&p, &d, 1);
    let g = GridSpec::default();
    let templates = PromptTemplate::defaults();
    for line in out.lines() {
        let rec = serde_json::from_str::<GritLine>(line).unwrap().to_record().unwrap();
        let pairs = instruction_examples(&rec, &templates, 11, g).unwrap();
        assert_eq!(pairs.len(), rec.refs.len() * 2);
        assert_eq!(pairs, instruction_examples(&rec, &templates, 11, g).unwrap());
        for pair in &pairs {
            let joined = format!("{}{}", pair.prompt, pair.target);
            let (links, failed) = extract_links(&joined, g);
            assert!(!failed && !links.is_empty(), "{joined}");
            assert!(parse(&joined, g).is_ok(), "{joined}");
        }
    }
}

#[test]
fn mismatched_streams_are_rejected_not_dropped() {
    let (p, d) = corpus(10, 4);
    let d: String = d.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let (_, rej, s) = build(&p, &d, 1);
    assert_eq!(s.pairs, 10);
    assert_eq!(s.rejected as usize, rej.lines().count());
    assert!(s.rejected >= 1);
}
