//! Browser demo: learning-rate schedule, MLM masking, and a CRF / KL
//! explorer. Every export takes and returns plain numbers or JSON strings,
//! so the same functions run natively in tests.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use selftrain::autodiff::Tape;
use selftrain::objectives::crf::{marginals, path_score, viterbi, CrfParams};
use selftrain::objectives::kl_logits_loss;
use selftrain::optim::schedule_factor;
use selftrain::rng;
use selftrain::tensor::softmax_row;
use selftrain::text::vocab::MASK;
use selftrain::text::{apply_mlm_mask, pack_ner_input, MaskingConfig, Vocab, NO_LABEL};

/// Effective learning rate at steps `0..=total`.
#[wasm_bindgen]
pub fn lr_curve(lr_base: f64, warmup: u32, total: u32) -> Vec<f64> {
    (0..=u64::from(total))
        .map(|t| lr_base * schedule_factor(t, u64::from(warmup), u64::from(total)))
        .collect()
}

fn error(msg: impl std::fmt::Display) -> String {
    json!({ "error": msg.to_string() }).to_string()
}

/// One masking draw over `text`: per character, what the rule did to it.
#[wasm_bindgen]
pub fn mask_demo(text: &str, rate: f64, seed: u32) -> String {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return error("empty text");
    }
    let alphabet: String = ('a'..='z').chain('0'..='9').collect();
    let vocab = match Vocab::build([text, alphabet.as_str()], 1) {
        Ok(v) => v,
        Err(e) => return error(e),
    };
    let cfg = MaskingConfig {
        rate,
        ..MaskingConfig::default()
    };
    let masked = pack_ner_input(text, None, &vocab, chars.len() + 2)
        .and_then(|p| apply_mlm_mask(&[p.clone()], &vocab, &mut rng::stream(u64::from(seed), "demo"), &cfg).map(|m| (p, m)));
    let (packed, m) = match masked {
        Ok(x) => x,
        Err(e) => return error(e),
    };
    let cells: Vec<Value> = chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = i + 1;
            let (orig, now) = (packed.token_ids[p], m.input_ids[0][p]);
            let action = if m.mlm_labels[0][p] == NO_LABEL {
                "none"
            } else if now == MASK {
                "mask"
            } else if now == orig {
                "keep"
            } else {
                "random"
            };
            json!({ "char": c.to_string(), "shown": vocab.token(now).unwrap_or("?"), "action": action })
        })
        .collect();
    json!({ "tokens": cells }).to_string()
}

fn parse_matrix(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let k = rows.first().map_or(0, Vec::len);
    if k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err("expected a non-empty rectangular matrix".into());
    }
    Ok(rows)
}

/// Viterbi path, log-partition and per-position tag marginals for
/// emissions `[n][k]` and transitions `[k][k]` (zero start/end scores).
#[wasm_bindgen]
pub fn crf_demo(emissions: &str, transitions: &str) -> String {
    let (em, tr) = match (parse_matrix(emissions), parse_matrix(transitions)) {
        (Ok(e), Ok(t)) => (e, t),
        (Err(e), _) | (_, Err(e)) => return error(e),
    };
    let k = em[0].len();
    if tr.len() != k || tr[0].len() != k {
        return error(format!("transitions must be {k}x{k}"));
    }
    let flat_em: Vec<f64> = em.concat();
    let flat_tr: Vec<f64> = tr.concat();
    let zeros = vec![0.0; k];
    let run = || -> selftrain::Result<Value> {
        let crf = CrfParams::new(&flat_tr, &zeros, &zeros)?;
        let path = viterbi(&flat_em, &crf)?;
        let score = path_score(&flat_em, &path, &crf)?;
        let m = marginals(&flat_em, &crf)?;
        let unary: Vec<&[f64]> = m.unary.chunks(k).collect();
        Ok(json!({
            "path": path,
            "path_score": score,
            "log_z": m.log_z,
            "path_probability": (score - m.log_z).exp(),
            "marginals": unary,
        }))
    };
    run().map_or_else(error, |v| v.to_string())
}

/// Teacher and student distributions at `temperature` and
/// `KL(teacher ‖ student)`.
#[wasm_bindgen]
pub fn kl_demo(teacher: &str, student: &str, temperature: f64) -> String {
    let parse = |s: &str| serde_json::from_str::<Vec<f64>>(s).map_err(|e| e.to_string());
    let (t, s) = match (parse(teacher), parse(student)) {
        (Ok(t), Ok(s)) if t.len() == s.len() && !t.is_empty() => (t, s),
        (Ok(_), Ok(_)) => return error("teacher and student need the same non-zero length"),
        (Err(e), _) | (_, Err(e)) => return error(e),
    };
    if !(temperature > 0.0) {
        return error("temperature must be positive");
    }
    let mut tape = Tape::<f64>::new();
    let sv = tape.constant(&[1, s.len()], s.clone());
    let kl = match kl_logits_loss(&mut tape, &t, sv, temperature) {
        Ok(v) => tape.scalar(v),
        Err(e) => return error(e),
    };
    let dist = |x: &[f64]| {
        let scaled: Vec<f64> = x.iter().map(|v| v / temperature).collect();
        let mut out = vec![0.0; x.len()];
        softmax_row(&scaled, &mut out);
        out
    };
    json!({ "teacher": dist(&t), "student": dist(&s), "kl": kl }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Value {
        serde_json::from_str(s).unwrap()
    }

    #[test]
    fn lr_curve_peaks_at_warmup_and_ends_at_zero() {
        let c = lr_curve(1.0, 10, 100);
        assert_eq!(c.len(), 101);
        assert_eq!(c[0], 0.0);
        assert!((c[5] - 0.5).abs() < 1e-12);
        assert!((c[10] - 1.0).abs() < 1e-12);
        assert_eq!(c[100], 0.0);
        assert!(c.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn masking_marks_every_character() {
        let v = parse(&mask_demo("hello world", 0.5, 3));
        let toks = v["tokens"].as_array().unwrap();
        assert_eq!(toks.len(), 11);
        assert!(toks.iter().any(|t| t["action"] != "none"));
        let none = parse(&mask_demo("abc", 0.0, 0));
        assert!(none["tokens"].as_array().unwrap().iter().all(|t| t["action"] == "none"));
        assert!(parse(&mask_demo("", 0.1, 0))["error"].is_string());
    }

    #[test]
    fn crf_explorer_agrees_with_its_own_marginals() {
        let v = parse(&crf_demo("[[2,0],[0,3],[2,0]]", "[[0,-1],[0,0]]"));
        assert_eq!(v["path"], json!([0, 1, 0]));
        for row in v["marginals"].as_array().unwrap() {
            let s: f64 = row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let p = v["path_probability"].as_f64().unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert!(parse(&crf_demo("[[1,2]]", "[[0]]"))["error"].is_string());
        assert!(parse(&crf_demo("nope", "[[0]]"))["error"].is_string());
    }

    #[test]
    fn kl_explorer_reports_zero_for_identical_logits() {
        let v = parse(&kl_demo("[1,2,3]", "[1,2,3]", 2.0));
        assert_eq!(v["kl"].as_f64().unwrap(), 0.0);
        let w = parse(&kl_demo("[3,0,0]", "[0,0,3]", 1.0));
        assert!(w["kl"].as_f64().unwrap() > 0.0);
        assert!(parse(&kl_demo("[1]", "[1,2]", 1.0))["error"].is_string());
    }
}
