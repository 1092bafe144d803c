use exemplar::corpus::{attach_embeddings, attach_query_embeddings, ingest_bank};
use exemplar::synth::{self, bank_stem, SynthConfig};

fn written(dir: &std::path::Path, seed: u64) -> Vec<(String, Vec<u8>)> {
    let mut bench = synth::generate(&SynthConfig {
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    bench.write_to(dir).unwrap();
    let mut names = bench.manifest.files.clone();
    names.push("synth.json".into());
    names
        .into_iter()
        .map(|n| (n.clone(), std::fs::read(dir.join(&n)).unwrap()))
        .collect()
}

#[test]
fn same_seed_writes_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let a = written(&tmp.path().join("a"), 3);
    let b = written(&tmp.path().join("b"), 3);
    assert_eq!(a, b);
    let c = written(&tmp.path().join("c"), 4);
    assert_ne!(a, c);
}

#[test]
fn written_banks_reload_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bench = synth::generate(&SynthConfig::default()).unwrap();
    bench.write_to(tmp.path()).unwrap();
    for (bank, validation) in [
        (&bench.target, false),
        (&bench.validation, true),
        (&bench.auxiliaries[0], false),
    ] {
        let stem = bank_stem(&bank.language, validation);
        let loaded = ingest_bank(tmp.path().join(format!("{stem}.jsonl")), &bank.language).unwrap();
        let loaded = attach_embeddings(loaded, tmp.path().join(format!("{stem}.emb"))).unwrap();
        let loaded = attach_query_embeddings(loaded, tmp.path().join(format!("{stem}.query.emb"))).unwrap();
        assert_eq!(&loaded, bank);
    }
}
