use std::fs;

use proptest::prelude::*;
use qcn_core::corpus::{
    encode_documents, examples, load_corpus, make_batches, write_corpus, CorpusFormat, Document,
    TextDocument, Vocab, BOS, EOS, PAD, UNK,
};
use qcn_core::Error;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn text_doc(pairs: &[(&str, &str)]) -> TextDocument {
    TextDocument {
        src: pairs.iter().map(|p| toks(p.0)).collect(),
        tgt: pairs.iter().map(|p| toks(p.1)).collect(),
    }
}

fn id_doc(srcs: &[&[usize]]) -> Document {
    Document {
        pairs: srcs.iter().map(|s| (s.to_vec(), s.to_vec())).collect(),
    }
}

#[test]
fn two_documents_of_two_and_three_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c");
    fs::write(p.with_extension("src"), "a b\nc\n<d>\nd e\nf\ng h i\n").unwrap();
    fs::write(p.with_extension("tgt"), "A B\nC\n<d>\nD E\nF\nG H I\n").unwrap();
    let docs = load_corpus(&p, CorpusFormat::DocText).unwrap();
    assert_eq!(
        docs.iter().map(TextDocument::len).collect::<Vec<_>>(),
        vec![2, 3]
    );
    assert_eq!(docs[1].src[2], toks("g h i"));
    assert_eq!(docs[1].tgt[0], toks("D E"));
}

#[test]
fn empty_files_give_no_documents() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e");
    fs::write(p.with_extension("src"), "").unwrap();
    fs::write(p.with_extension("tgt"), "").unwrap();
    assert!(load_corpus(&p, CorpusFormat::DocText).unwrap().is_empty());
    let j = dir.path().join("e.jsonl");
    fs::write(&j, "").unwrap();
    assert!(load_corpus(&j, CorpusFormat::Jsonl).unwrap().is_empty());
}

#[test]
fn malformed_inputs_report_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad");
    let line_of = |src: &str, tgt: &str| {
        fs::write(p.with_extension("src"), src).unwrap();
        fs::write(p.with_extension("tgt"), tgt).unwrap();
        match load_corpus(&p, CorpusFormat::DocText) {
            Err(Error::Parse { line, .. }) => line,
            other => panic!("expected parse error, got {other:?}"),
        }
    };
    assert_eq!(line_of("a\n<d>\nb\n", "A\nB\nC\n"), 2);
    assert_eq!(line_of("a\nb <d>\n", "A\nB\n"), 2);
    assert_eq!(line_of("a\nb\nc\n", "A\nB\n"), 3);
    let j = dir.path().join("bad.jsonl");
    fs::write(
        &j,
        "{\"src\": [\"a\"], \"tgt\": [\"A\"]}\n{\"src\": [\"a\", \"b\"], \"tgt\": [\"A\"]}\n",
    )
    .unwrap();
    assert!(matches!(
        load_corpus(&j, CorpusFormat::Jsonl),
        Err(Error::Parse { line: 2, .. })
    ));
    assert!(load_corpus(&dir.path().join("missing"), CorpusFormat::DocText).is_err());
}

#[test]
fn write_then_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let docs = vec![
        text_doc(&[("a b", "x"), ("c", "y z")]),
        text_doc(&[("d", "w")]),
        text_doc(&[("e f g", "u v"), ("h", "t"), ("i", "s")]),
    ];
    for (name, fmt) in [
        ("c", CorpusFormat::DocText),
        ("c.jsonl", CorpusFormat::Jsonl),
    ] {
        let p = dir.path().join(name);
        write_corpus(&p, fmt, &docs).unwrap();
        assert_eq!(load_corpus(&p, fmt).unwrap(), docs);
    }
}

#[test]
fn vocab_ids_by_count_then_token() {
    let sents = [toks("a a b")];
    let v = Vocab::build(&sents, 1);
    assert_eq!((v.id("a"), v.id("b")), (4, 5));
    let v2 = Vocab::build(&sents, 2);
    assert_eq!(v2.id("b"), UNK);
    assert_eq!(v2.len(), 5);
    assert_eq!(Vocab::build(&sents, 1), v);
    assert_eq!(
        [v.token(PAD), v.token(BOS), v.token(EOS)],
        ["<pad>", "<s>", "</s>"]
    );
}

#[test]
fn context_window_respects_document_start() {
    let doc = id_doc(&[&[4], &[5], &[6]]);
    let (ex, _) = examples(&[doc], 3, 10);
    assert_eq!(
        ex.iter().map(|e| e.context.len()).collect::<Vec<_>>(),
        vec![0, 1, 2]
    );
    assert_eq!(ex[2].context, vec![vec![5], vec![4]]);
}

#[test]
fn no_cross_document_context() {
    let (ex, _) = examples(&[id_doc(&[&[4], &[5]]), id_doc(&[&[6], &[7]])], 2, 10);
    assert!(ex[2].context.is_empty());
    assert_eq!(ex[3].context, vec![vec![6]]);
}

#[test]
fn long_pair_dropped_from_hand_counted_fixture() {
    // 6 pairs, one with 7 source tokens; batches of 2 → 3 batches of 5 pairs
    let docs = vec![
        id_doc(&[&[4, 5], &[4, 5, 6, 7, 8, 9, 10], &[4]]),
        id_doc(&[&[5, 6, 7], &[8], &[9, 9, 9, 9, 9]]),
    ];
    let (batches, dropped) = make_batches(&docs, 2, 2, 5, 0);
    assert_eq!(dropped, 1);
    assert_eq!(batches.len(), 3);
    assert_eq!(batches.iter().map(|b| b.size).sum::<usize>(), 5);
    // the dropped sentence still serves as context for its successor
    let (ex, _) = examples(&docs, 2, 5);
    let third = ex.iter().find(|e| e.doc == 0 && e.sent == 2).unwrap();
    assert_eq!(third.context[0], vec![4, 5, 6, 7, 8, 9, 10]);
}

#[test]
fn batch_framing_and_masks() {
    let (ex, _) = examples(&[id_doc(&[&[4, 5], &[6, 7, 8]])], 2, 10);
    let (batches, _) = make_batches(&[id_doc(&[&[4, 5], &[6, 7, 8]])], 2, 8, 10, 0);
    let b = &batches[0];
    assert_eq!(b.size, 2);
    assert_eq!((b.src_len, b.tgt_len), (3, 4));
    let i = b.sent_index.iter().position(|&s| s == 0).unwrap();
    assert_eq!(b.src_row(i), &[4, 5, PAD]);
    assert_eq!(&b.tgt_in[i * 4..i * 4 + 4], &[BOS, 4, 5, PAD]);
    assert_eq!(&b.tgt_out[i * 4..i * 4 + 4], &[4, 5, EOS, PAD]);
    assert_eq!(&b.tgt_mask[i * 4..i * 4 + 4], &[1.0, 1.0, 1.0, 0.0]);
    assert_eq!(b.context_present[i], vec![false, false]);
    assert_eq!(b.context_present[1 - i], vec![true, false]);
    assert_eq!(ex.len(), 2);
}

#[test]
fn encoding_maps_unknown_tokens() {
    let docs = [text_doc(&[("a b", "x")])];
    let src = Vocab::build(&docs[0].src, 1);
    let tgt = Vocab::build(&docs[0].tgt, 1);
    let other = vec![text_doc(&[("a q", "x y")])];
    let enc = encode_documents(&other, &src, &tgt);
    assert_eq!(
        enc[0].pairs[0],
        (vec![src.id("a"), UNK], vec![tgt.id("x"), UNK])
    );
}

fn arb_docs() -> impl Strategy<Value = Vec<Document>> {
    let sent = prop::collection::vec(4usize..20, 1..6);
    let doc = prop::collection::vec(sent, 1..6).prop_map(|s| Document {
        pairs: s.into_iter().map(|x| (x.clone(), x)).collect(),
    });
    prop::collection::vec(doc, 1..5)
}

proptest! {
    #[test]
    fn context_stays_inside_document_and_before_sentence(docs in arb_docs(), k in 0usize..4) {
        let (ex, _) = examples(&docs, k, 100);
        for e in &ex {
            let doc = &docs[e.doc];
            prop_assert!(e.context.len() <= k.min(e.sent));
            for (i, c) in e.context.iter().enumerate() {
                prop_assert_eq!(c, &doc.pairs[e.sent - 1 - i].0);
            }
        }
    }

    #[test]
    fn batching_is_a_pure_function_of_seed(docs in arb_docs(), seed in any::<u64>(), bs in 1usize..6) {
        let a = make_batches(&docs, 2, bs, 4, seed);
        let b = make_batches(&docs, 2, bs, 4, seed);
        prop_assert_eq!(a, b);
    }
}
