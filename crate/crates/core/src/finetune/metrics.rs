use std::fmt::Write;

use crate::data::{EMOTIONS, NUM_EMOTIONS};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn from_predictions(preds: &[bool], targets: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in preds.iter().zip(targets) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Balanced accuracy `(TPR + TNR) / 2`; `None` when a class is absent.
    pub fn weighted_accuracy(&self) -> Option<f64> {
        let pos = self.tp + self.fn_;
        let neg = self.tn + self.fp;
        if pos == 0 || neg == 0 {
            return None;
        }
        // One rounding: (TP·neg + TN·pos) / (2·pos·neg).
        let num = (self.tp * neg + self.tn * pos) as f64;
        Some(num / (2 * pos * neg) as f64)
    }

    /// `2PR / (P + R)`, or 0 when `P + R = 0`.
    pub fn f1(&self) -> f64 {
        // 2TP / (2TP + FP + FN) equals 2PR/(P+R) whenever the latter is defined.
        let denom = 2 * self.tp + self.fp + self.fn_;
        if self.tp == 0 || denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

pub fn weighted_accuracy(preds: &[bool], targets: &[bool]) -> Option<f64> {
    Confusion::from_predictions(preds, targets).weighted_accuracy()
}

pub fn f1(preds: &[bool], targets: &[bool]) -> f64 {
    Confusion::from_predictions(preds, targets).f1()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmotionRow {
    pub name: &'static str,
    pub wa: Option<f64>,
    pub f1: f64,
    pub counts: Confusion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EmotionRow>,
    pub macro_wa: f64,
    pub macro_f1: f64,
    /// Emotions left out of `macro_wa` because WA is undefined for them.
    pub wa_excluded: Vec<&'static str>,
    /// Across-run standard deviation of (macro WA, macro F1).
    pub run_std: Option<(f64, f64)>,
    pub runs: usize,
}

impl EvalReport {
    /// Scores probabilities against binary targets at [`THRESHOLD`].
    pub fn from_probs(probs: &[[f64; NUM_EMOTIONS]], targets: &[[u8; NUM_EMOTIONS]]) -> Self {
        let mut rows = Vec::with_capacity(NUM_EMOTIONS);
        for (k, &name) in EMOTIONS.iter().enumerate() {
            let preds: Vec<bool> = probs.iter().map(|p| p[k] >= THRESHOLD).collect();
            let truth: Vec<bool> = targets.iter().map(|t| t[k] == 1).collect();
            let counts = Confusion::from_predictions(&preds, &truth);
            rows.push(EmotionRow {
                name,
                wa: counts.weighted_accuracy(),
                f1: counts.f1(),
                counts,
            });
        }
        let defined: Vec<f64> = rows.iter().filter_map(|r| r.wa).collect();
        let wa_excluded = rows
            .iter()
            .filter(|r| r.wa.is_none())
            .map(|r| r.name)
            .collect();
        let macro_wa = if defined.is_empty() {
            0.0
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        let macro_f1 = rows.iter().map(|r| r.f1).sum::<f64>() / rows.len() as f64;
        Self {
            rows,
            macro_wa,
            macro_f1,
            wa_excluded,
            run_std: None,
            runs: 1,
        }
    }

    /// Mean of macro WA and macro F1, used for model selection.
    pub fn selection_score(&self) -> f64 {
        (self.macro_wa + self.macro_f1) / 2.0
    }

    pub fn examples(&self) -> usize {
        self.rows.first().map_or(0, |r| r.counts.total())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "emotion    WA      F1      TP    FP    TN    FN");
        for r in &self.rows {
            let wa = r.wa.map_or("   n/a".to_string(), |w| format!("{w:.4}"));
            let c = r.counts;
            let _ = writeln!(
                s,
                "{:<10} {wa:<7} {:<7.4} {:<5} {:<5} {:<5} {}",
                r.name, r.f1, c.tp, c.fp, c.tn, c.fn_
            );
        }
        let flag = if self.wa_excluded.is_empty() {
            String::new()
        } else {
            format!("  (WA excludes {})", self.wa_excluded.join(","))
        };
        let _ = writeln!(
            s,
            "{:<10} {:<7.4} {:.4}{flag}",
            "macro", self.macro_wa, self.macro_f1
        );
        if let Some((swa, sf1)) = self.run_std {
            let _ = writeln!(
                s,
                "{:<10} {:<7.4} {:.4}  (across {} runs)",
                "run-std", swa, sf1, self.runs
            );
        }
        let _ = writeln!(s, "examples   {}", self.examples());
        s
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let wa = r.wa.map_or("nan".to_string(), |w| w.to_string());
            let c = r.counts;
            let _ = writeln!(s, "{}.wa={wa}", r.name);
            let _ = writeln!(s, "{}.f1={}", r.name, r.f1);
            let _ = writeln!(s, "{}.tp={}", r.name, c.tp);
            let _ = writeln!(s, "{}.fp={}", r.name, c.fp);
            let _ = writeln!(s, "{}.tn={}", r.name, c.tn);
            let _ = writeln!(s, "{}.fn={}", r.name, c.fn_);
        }
        let _ = writeln!(s, "macro.wa={}", self.macro_wa);
        let _ = writeln!(s, "macro.f1={}", self.macro_f1);
        let _ = writeln!(s, "macro.wa_excluded={}", self.wa_excluded.join(","));
        if let Some((swa, sf1)) = self.run_std {
            let _ = writeln!(s, "runs.std.wa={swa}");
            let _ = writeln!(s, "runs.std.f1={sf1}");
        }
        let _ = writeln!(s, "runs={}", self.runs);
        let _ = writeln!(s, "examples={}", self.examples());
        s
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}
