//! Synthetic stand-in for the clinical dialogue corpus.
//!
//! Every class owns five signature words. A dialogue is a few doctor/patient
//! turn pairs built from a shared filler pool; each doctor turn carries one
//! signature word, each patient turn one signature word and one "finding"
//! word. The section text keeps only the patient turns' signature and finding
//! words behind a fixed lead, so it is a deterministic compression of the
//! dialogue. Class frequencies are skewed toward FAM/SOCHX and GENHX.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{SectionHeader, Triplet};
use crate::seed::rng_from;

/// Signature words per class, in class-id order.
pub const SIGNATURES: [[&str; 5]; 20] = [
    ["smoke", "alcohol", "mother", "father", "married"],
    ["pain", "started", "weeks", "worse", "symptoms"],
    ["diabetes", "hypertension", "asthma", "history", "chronic"],
    ["complaint", "today", "came", "concern", "main"],
    ["surgery", "operation", "appendectomy", "removed", "scar"],
    ["allergic", "penicillin", "rash", "reaction", "hives"],
    ["fever", "chills", "nausea", "cough", "dizziness"],
    ["taking", "tablet", "dose", "milligrams", "daily"],
    ["assess", "likely", "consistent", "impression", "stable"],
    ["examine", "breath", "palpate", "reflexes", "tender"],
    ["diagnosed", "condition", "confirmed", "disease", "infection"],
    ["discharge", "home", "admitted", "follow", "transfer"],
    ["plan", "schedule", "start", "referral", "continue"],
    ["emergency", "arrived", "monitored", "fluids", "observed"],
    ["vaccine", "shot", "flu", "tetanus", "booster"],
    ["xray", "scan", "mri", "ultrasound", "film"],
    ["period", "pregnant", "menstrual", "pregnancies", "menopause"],
    ["procedure", "biopsy", "injection", "catheter", "sutures"],
    ["other", "previous", "records", "background", "prior"],
    ["blood", "labs", "results", "levels", "count"],
];

/// Relative class weights (percent), in class-id order.
const CLASS_WEIGHTS: [u32; 20] = [25, 21, 8, 6, 5, 5, 4, 4, 3, 3, 2, 2, 2, 2, 2, 1, 1, 2, 1, 1];

const ONSETS: [&str; 12] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

/// Deterministic pseudo-word for an index; distinct indices give distinct words.
fn pseudo_word(mut i: usize) -> String {
    let syllables = ONSETS.len() * VOWELS.len();
    let mut w = String::new();
    // three syllables minimum keeps pseudo-words clear of the signature words
    for _ in 0..3 {
        let s = i % syllables;
        w.push_str(ONSETS[s / VOWELS.len()]);
        w.push_str(VOWELS[s % VOWELS.len()]);
        i /= syllables;
    }
    while i > 0 {
        let s = i % syllables;
        w.push_str(ONSETS[s / VOWELS.len()]);
        w.push_str(VOWELS[s % VOWELS.len()]);
        i /= syllables;
    }
    w
}

/// Generates `n` learnable triplets. `vocab_size` is the approximate number of
/// distinct filler plus finding words the generator draws from.
pub fn generate_synthetic_corpus(n: usize, seed: u64, vocab_size: usize) -> Vec<Triplet> {
    let pool = vocab_size.max(8);
    let n_findings = (pool / 4).max(2);
    let n_filler = (pool - n_findings).max(2);
    let filler: Vec<String> = (0..n_filler).map(pseudo_word).collect();
    let findings: Vec<String> = (n_filler..n_filler + n_findings).map(pseudo_word).collect();

    let mut rng = rng_from(seed, "synthetic-corpus");
    let classes = WeightedIndex::new(CLASS_WEIGHTS).expect("static weights are valid");

    (0..n)
        .map(|idx| {
            let class = classes.sample(&mut rng);
            let header = SectionHeader::from_class_id(class).expect("class id in range");
            let sig = &SIGNATURES[class];
            let turns = rng.random_range(2..=4);
            let mut lines = Vec::with_capacity(2 * turns);
            let mut summary = vec!["The".to_string(), "patient".to_string()];
            for _ in 0..turns {
                let mut doctor = vec!["Doctor:".to_string()];
                for _ in 0..rng.random_range(2..=4) {
                    doctor.push(filler[rng.random_range(0..filler.len())].clone());
                }
                let pos = rng.random_range(1..=doctor.len());
                doctor.insert(pos, sig[rng.random_range(0..sig.len())].to_string());
                lines.push(format!("{}?", doctor.join(" ")));

                let mut patient = vec!["Patient:".to_string()];
                for _ in 0..rng.random_range(1..=3) {
                    patient.push(filler[rng.random_range(0..filler.len())].clone());
                }
                let s = sig[rng.random_range(0..sig.len())];
                let f = &findings[rng.random_range(0..findings.len())];
                patient.push(s.to_string());
                patient.push(f.clone());
                lines.push(format!("{}.", patient.join(" ")));
                summary.push(s.to_string());
                summary.push(f.clone());
            }
            Triplet {
                id: format!("syn-{idx:05}"),
                dialogue: lines.join("\n"),
                header,
                section_text: format!("{} .", summary.join(" ")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn deterministic() {
        assert_eq!(
            generate_synthetic_corpus(200, 7, 300),
            generate_synthetic_corpus(200, 7, 300)
        );
        assert_ne!(
            generate_synthetic_corpus(20, 7, 300),
            generate_synthetic_corpus(20, 8, 300)
        );
    }

    #[test]
    fn majority_is_famsochx_or_genhx() {
        let corpus = generate_synthetic_corpus(200, 7, 300);
        let mut counts = [0usize; 20];
        for t in &corpus {
            counts[t.header.class_id()] += 1;
            t.validate().unwrap();
        }
        let top = (0..20).max_by_key(|&c| (counts[c], usize::MAX - c)).unwrap();
        assert!(top == SectionHeader::FamSocHx.class_id() || top == SectionHeader::GenHx.class_id());
    }

    #[test]
    fn signatures_are_distinct_and_disjoint_from_filler() {
        let sigs: HashSet<&str> = SIGNATURES.iter().flatten().copied().collect();
        assert_eq!(sigs.len(), 100);
        let pseudo: HashSet<String> = (0..5000).map(pseudo_word).collect();
        assert_eq!(pseudo.len(), 5000);
        assert!(pseudo.iter().all(|w| !sigs.contains(w.as_str())));
    }

    #[test]
    fn summary_is_compression_of_patient_turns() {
        for t in generate_synthetic_corpus(50, 3, 200) {
            let mut expected = vec!["The".to_string(), "patient".to_string()];
            for line in t.dialogue.lines().filter(|l| l.starts_with("Patient:")) {
                let words: Vec<&str> = line.trim_end_matches('.').split(' ').collect();
                expected.push(words[words.len() - 2].to_string());
                expected.push(words[words.len() - 1].to_string());
            }
            assert_eq!(t.section_text, format!("{} .", expected.join(" ")));
        }
    }
}
