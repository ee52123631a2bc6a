//! Writes the bundled demo: a synthetic emergency-department corpus over 23
//! conditions, its anchor, label and noise files, and the moments-initialized
//! model built from it with `clintag ingest` and `clintag init`.
//!
//! cargo run -p clintag-cli --example demo_corpus -- [OUT_DIR]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clintag_core::model_file::write_noise;
use clintag_core::text::{write_visits, RawVisit};
use clintag_core::{NoiseModel, NoiseRates};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Condition {
    name: &'static str,
    code: &'static str,
    anchors: &'static [&'static str],
    words: &'static [&'static str],
    prior: f64,
    sensitivity: f64,
}

const fn c(
    name: &'static str,
    code: &'static str,
    anchors: &'static [&'static str],
    words: &'static [&'static str],
    prior: f64,
    sensitivity: f64,
) -> Condition {
    Condition {
        name,
        code,
        anchors,
        words,
        prior,
        sensitivity,
    }
}

const CONDITIONS: [Condition; 23] = [
    c(
        "abdominal pain acute",
        "789",
        &["abdominal pain"],
        &["nausea", "vomiting", "tenderness", "rlq", "lipase"],
        0.14,
        0.85,
    ),
    c(
        "alcohol acute",
        "303",
        &["etoh", "intoxicated"],
        &["slurred", "ataxic", "ciwa", "thiamine", "breathalyzer"],
        0.12,
        0.9,
    ),
    c(
        "allergic reaction acute",
        "995.3",
        &["hives", "med:epinephrine"],
        &["itching", "rash", "swelling", "lip", "benadryl"],
        0.06,
        0.8,
    ),
    c(
        "asthma-copd acute",
        "493",
        &["wheezing", "med:albuterol"],
        &["sob", "nebs", "dyspnea", "cough", "inhaler"],
        0.1,
        0.85,
    ),
    c(
        "back pain acute",
        "724",
        &["back pain"],
        &["lumbar", "spasm", "radiating", "ambulating", "tenderness"],
        0.09,
        0.8,
    ),
    c(
        "cellulitis acute",
        "682",
        &["cellulitis", "med:cephalexin"],
        &["erythema", "warmth", "swelling", "redness", "abscess"],
        0.08,
        0.85,
    ),
    c(
        "cva acute",
        "434",
        &["stroke", "tpa"],
        &["weakness", "facial", "droop", "aphasia", "neuro"],
        0.05,
        0.75,
    ),
    c(
        "epistaxis acute",
        "784.7",
        &["epistaxis", "nosebleed"],
        &["nose", "bleeding", "packing", "afrin", "anticoagulated"],
        0.04,
        0.9,
    ),
    c(
        "fall acute",
        "E888",
        &["fall", "fell"],
        &["mechanical", "trip", "head", "hip", "elderly"],
        0.12,
        0.8,
    ),
    c(
        "gi bleed acute",
        "578",
        &["melena", "hematemesis"],
        &["guaiac", "blood", "stool", "hct", "transfusion"],
        0.06,
        0.75,
    ),
    c(
        "headache acute",
        "784.0",
        &["headache", "migraine"],
        &["photophobia", "nausea", "throbbing", "reglan", "neuro"],
        0.08,
        0.85,
    ),
    c(
        "hematuria acute",
        "599.7",
        &["hematuria"],
        &["blood", "urine", "clots", "foley", "flank"],
        0.04,
        0.8,
    ),
    c(
        "intracranial hemorrhage acute",
        "431",
        &["ich", "sah"],
        &["ct", "head", "neurosurgery", "gcs", "weakness"],
        0.03,
        0.7,
    ),
    c(
        "kidney stone acute",
        "592",
        &["nephrolithiasis", "kidney stone"],
        &["flank", "colicky", "toradol", "strainer", "groin"],
        0.05,
        0.8,
    ),
    c(
        "vehicle collision acute",
        "E812",
        &["mvc"],
        &["restrained", "airbag", "driver", "collar", "neck"],
        0.06,
        0.9,
    ),
    c(
        "pneumonia acute",
        "486",
        &["pneumonia", "med:levofloxacin"],
        &["fever", "cough", "infiltrate", "cxr", "sputum"],
        0.08,
        0.75,
    ),
    c(
        "severe sepsis acute",
        "995.92",
        &["sepsis", "septic"],
        &["fever", "hypotension", "lactate", "fluids", "tachycardic"],
        0.05,
        0.7,
    ),
    c(
        "sexual assault acute",
        "V71.5",
        &["sexual assault"],
        &["police", "kit", "counselor", "prophylaxis", "advocate"],
        0.02,
        0.9,
    ),
    c(
        "suicidal ideation acute",
        "V62.84",
        &["si", "suicidal"],
        &["depression", "psych", "sitter", "overdose", "plan"],
        0.07,
        0.85,
    ),
    c(
        "syncope acute",
        "780.2",
        &["syncope", "syncopal"],
        &["lightheaded", "ekg", "orthostatic", "passed", "tele"],
        0.06,
        0.8,
    ),
    c(
        "uti acute",
        "599.0",
        &["uti", "med:nitrofurantoin"],
        &["dysuria", "frequency", "urine", "burning", "ua"],
        0.1,
        0.8,
    ),
    c(
        "liver history",
        "571",
        &["cirrhosis", "hepatitis"],
        &["ascites", "jaundice", "lactulose", "varices", "inr"],
        0.05,
        0.75,
    ),
    c(
        "hiv history",
        "042",
        &["hiv", "med:truvada"],
        &["cd4", "viral", "load", "id", "haart"],
        0.03,
        0.85,
    ),
];

const FALSE_ANCHOR_RATE: f64 = 0.02;
const WORD_RATE: f64 = 0.6;
const WORD_LEAK: f64 = 0.02;
const N_VISITS: usize = 2500;
const SEED: u64 = 20161;

const FILLER: [(&str, f64); 8] = [
    ("pt", 0.8),
    ("today", 0.6),
    ("seen", 0.3),
    ("vss", 0.4),
    ("nad", 0.25),
    ("ambulatory", 0.2),
    ("eval", 0.3),
    ("family", 0.1),
];

const DENIED: [&str; 8] = [
    "fever",
    "vomiting",
    "chest pain",
    "headache",
    "sob",
    "trauma",
    "loc",
    "bleeding",
];

const OTHER_MEDS: [&str; 6] = [
    "lisinopril",
    "metformin",
    "aspirin",
    "atorvastatin",
    "omeprazole",
    "sertraline",
];

fn anchor_text(anchor: &str) -> Option<&str> {
    (!anchor.starts_with("med:")).then_some(anchor)
}

fn visit<R: Rng>(rng: &mut R, k: usize) -> RawVisit {
    let present: Vec<&Condition> = CONDITIONS
        .iter()
        .filter(|c| rng.gen_bool(c.prior))
        .collect();
    let mut words: Vec<String> = Vec::new();
    let mut meds: Vec<String> = Vec::new();
    let mut chief = Vec::new();
    for cond in &CONDITIONS {
        let is_present = present.iter().any(|p| p.name == cond.name);
        let rate = if is_present {
            cond.sensitivity
        } else {
            FALSE_ANCHOR_RATE
        };
        if rng.gen_bool(rate) {
            let anchor = cond.anchors.choose(rng).expect("anchors listed");
            match anchor_text(anchor) {
                Some(text) => chief.push(text.to_string()),
                None => meds.push(anchor.trim_start_matches("med:").to_string()),
            }
        }
        for w in cond.words {
            let p = if is_present { WORD_RATE } else { WORD_LEAK };
            if rng.gen_bool(p) {
                words.push(w.to_string());
            }
        }
    }
    words.sort();
    words.dedup();
    words.shuffle(rng);
    for (w, p) in FILLER {
        if rng.gen_bool(p) {
            words.push(w.to_string());
        }
    }
    let mut md = Vec::new();
    for d in DENIED {
        if rng.gen_bool(0.15) {
            md.push(format!("denies {d}."));
        }
    }
    if rng.gen_bool(0.2) {
        md.push("no acute distress - nausea".to_string());
    }
    let medication_history = OTHER_MEDS
        .iter()
        .filter(|_| rng.gen_bool(0.08))
        .map(|m| m.to_string())
        .collect();
    let billing_codes = present
        .iter()
        .map(|c| {
            if c.code.contains('.') {
                c.code.to_string()
            } else {
                format!("{}.9", c.code)
            }
        })
        .collect();
    RawVisit {
        id: format!("demo-{k:05}"),
        age: Some(rng.gen_range(18.0..95.0_f64).floor()),
        sex: Some(if rng.gen_bool(0.5) { "F" } else { "M" }.to_string()),
        chief_complaint: chief.join(", "),
        triage: words.join(" "),
        md_comments: md.join(" "),
        medication_history,
        dispensed_medications: meds,
        billing_codes,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    std::fs::write(path, text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
}

fn clintag(args: &[&str]) {
    let mut argv = vec!["clintag"];
    argv.extend_from_slice(args);
    let code = clintag_cli::run(argv);
    assert_eq!(code, 0, "clintag {args:?} exited with {code}");
}

fn main() {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/demo"));
    std::fs::create_dir_all(&out).expect("create output directory");
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let visits: Vec<RawVisit> = (0..N_VISITS).map(|k| visit(&mut rng, k)).collect();
    write_visits(&out.join("corpus.jsonl"), &visits).expect("write corpus");

    let anchors: BTreeMap<&str, &[&str]> = CONDITIONS.iter().map(|c| (c.name, c.anchors)).collect();
    let labels: BTreeMap<&str, [&str; 1]> = CONDITIONS.iter().map(|c| (c.name, [c.code])).collect();
    write_json(&out.join("anchors.json"), &anchors);
    write_json(&out.join("labels.json"), &labels);
    let by_name: BTreeMap<&str, &Condition> = CONDITIONS.iter().map(|c| (c.name, c)).collect();
    let rates = by_name
        .values()
        .map(|c| NoiseRates::new(c.sensitivity, FALSE_ANCHOR_RATE))
        .collect();
    write_noise(
        &out.join("noise.json"),
        &NoiseModel::new(rates).expect("valid rates"),
    )
    .expect("write noise");

    let bigrams: Vec<&str> = CONDITIONS
        .iter()
        .flat_map(|c| c.anchors.iter().copied())
        .chain(DENIED.iter().copied())
        .filter(|a| a.contains(' '))
        .collect();
    let work = tempfile::tempdir().expect("temporary directory");
    let ingest_dir = work.path().join("ingest");
    let init_dir = work.path().join("init");
    let s = |p: &Path| p.to_string_lossy().into_owned();
    clintag(&[
        "ingest",
        "--deterministic",
        "--out",
        &s(&ingest_dir),
        "--corpus",
        &s(&out.join("corpus.jsonl")),
        "--anchors",
        &s(&out.join("anchors.json")),
        "--labels",
        &s(&out.join("labels.json")),
        "--bigrams",
        &bigrams.join(","),
    ]);
    clintag(&[
        "init",
        "--deterministic",
        "--out",
        &s(&init_dir),
        "--dataset",
        &s(&ingest_dir.join("dataset.jsonl")),
        "--noise",
        &s(&out.join("noise.json")),
    ]);
    for (dir, file) in [(&ingest_dir, "vocabulary.json"), (&init_dir, "model.json")] {
        std::fs::copy(dir.join(file), out.join(file)).expect("copy output");
    }
    println!(
        "wrote {} visits and a {}-condition model to {}",
        visits.len(),
        CONDITIONS.len(),
        out.display()
    );
}
