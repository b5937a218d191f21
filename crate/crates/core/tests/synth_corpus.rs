//! Synthetic corpus generation through the on-disk format.

use std::collections::HashSet;
use std::path::Path;

use delib_core::frontend::read_feature_set;
use delib_core::synth::{
    generate_corpus, read_transcripts, write_corpus, LanguageSpec, Script, Split, SynthConfig, SPLITS,
};

fn small(seed: u64) -> SynthConfig {
    let mut cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    for (l, n) in cfg.languages.iter_mut().zip([30, 20, 10]) {
        l.utterances = n;
    }
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn written(cfg: &SynthConfig) -> (tempfile::TempDir, Vec<(String, Vec<u8>)>) {
    let dir = tempfile::tempdir().unwrap();
    let (world, utts) = generate_corpus(cfg).unwrap();
    write_corpus(dir.path(), &world, &utts).unwrap();
    let f = files(dir.path());
    (dir, f)
}

#[test]
fn same_seed_gives_byte_identical_files() {
    let (_a, a) = written(&small(5));
    let (_b, b) = written(&small(5));
    assert!(a.len() >= 2 + 2 * SPLITS.len());
    assert_eq!(a, b);
    let (_c, c) = written(&small(6));
    assert_ne!(a, c);
}

#[test]
fn counts_splits_and_manifests_agree() {
    let cfg = small(2);
    let (dir, _) = written(&cfg);
    let entries = read_transcripts(dir.path()).unwrap();
    for l in &cfg.languages {
        assert_eq!(entries.iter().filter(|e| e.language == l.name).count(), l.utterances);
    }
    let ids = |s: Split| entries.iter().filter(|e| e.split == s).map(|e| e.id.clone()).collect::<HashSet<_>>();
    let (train, dev, test) = (ids(Split::Train), ids(Split::Dev), ids(Split::Test));
    assert!(train.is_disjoint(&test) && train.is_disjoint(&dev) && dev.is_disjoint(&test));
    assert_eq!(train.len() + dev.len() + test.len(), entries.len());
    for split in SPLITS {
        let feats = read_feature_set(&dir.path().join(split.name())).unwrap();
        let got: HashSet<String> = feats.iter().map(|f| f.utterance_id.clone()).collect();
        assert_eq!(got, ids(split), "{}", split.name());
        assert!(feats.iter().all(|f| f.dim() == 80));
    }
}

#[test]
fn noiseless_audio_decodes_to_every_transcript() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..small(9)
    };
    let (world, utts) = generate_corpus(&cfg).unwrap();
    for u in &utts {
        assert_eq!(world.decode_noiseless(&u.features.frames).unwrap(), u.text, "{}", u.id);
    }
}

#[test]
fn grammar_rows_are_distributions_and_templates_separate() {
    let cfg = SynthConfig::default();
    let (world, _) = generate_corpus(&small(1)).unwrap();
    for lm in &world.languages {
        let sum: f64 = lm.start.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for row in &lm.bigram {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }
    let inv = cfg.inventories();
    for i in 0..inv.len() {
        for j in 0..i {
            assert!(inv[i].iter().all(|c| !inv[j].contains(c)));
        }
    }
    assert!(world.min_template_distance() > 6.0 * cfg.noise_sigma);
}

#[test]
fn overlapping_inventories_are_rejected() {
    let lang = |name: &str, alphabet: &str| LanguageSpec {
        name: name.into(),
        script: Script::Alphabetic,
        utterances: 5,
        min_len: 1,
        max_len: 2,
        alphabet: Some(alphabet.into()),
    };
    let mut cfg = SynthConfig {
        languages: vec![lang("p", "abc"), lang("q", "xyz")],
        ..SynthConfig::default()
    };
    assert!(generate_corpus(&cfg).is_ok());
    cfg.languages[1].alphabet = Some("xyc".into());
    let err = generate_corpus(&cfg).unwrap_err().to_string();
    assert!(err.contains("overlap"), "{err}");
}
