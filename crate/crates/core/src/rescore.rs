//! N-best rescoring, score tables, interpolation and word error rate.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Result, TrfError};
use crate::model::TrfModel;
use crate::par;

/// Column name of the per-hypothesis mean over models.
pub const AVG_MODEL: &str = "avg";
pub const SCORE_SCHEMA: &str = "# ntrf-scores 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub index: u32,
    pub text: String,
    pub acoustic: Option<f64>,
}

/// Utterance id → hypotheses in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NBestSet {
    utts: BTreeMap<String, Vec<Hypothesis>>,
}

impl NBestSet {
    /// Parses lines `<utt_id> <hyp_index> [am=<float>] <token ...>`.
    pub fn parse<R: BufRead>(r: R) -> Result<Self> {
        let mut set = NBestSet::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| TrfError::Rescore(format!("n-best line {}: {what}", n + 1));
            let mut fields = line.split_whitespace().peekable();
            let utt = fields.next().ok_or_else(|| bad("missing utterance id"))?;
            let index: u32 = fields
                .next()
                .ok_or_else(|| bad("missing hypothesis index"))?
                .parse()
                .map_err(|_| bad("hypothesis index is not an integer"))?;
            let mut acoustic = None;
            if let Some(am) = fields.peek().and_then(|f| f.strip_prefix("am=")) {
                acoustic = Some(am.parse::<f64>().map_err(|_| bad("bad acoustic score"))?);
                fields.next();
            }
            let text = fields.collect::<Vec<_>>().join(" ");
            set.push(utt, Hypothesis { index, text, acoustic })?;
        }
        if set.utts.is_empty() {
            return Err(TrfError::Rescore("empty n-best list".into()));
        }
        Ok(set)
    }

    pub fn push(&mut self, utt: &str, h: Hypothesis) -> Result<()> {
        let hyps = self.utts.entry(utt.to_string()).or_default();
        if hyps.iter().any(|o| o.index == h.index) {
            return Err(TrfError::Rescore(format!("duplicate hypothesis {} for {utt}", h.index)));
        }
        hyps.push(h);
        Ok(())
    }

    pub fn utterances(&self) -> impl Iterator<Item = (&str, &[Hypothesis])> {
        self.utts.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.utts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utts.is_empty()
    }

    pub fn num_hypotheses(&self) -> usize {
        self.utts.values().map(|v| v.len()).sum()
    }
}

pub type ScoreKey = (String, u32);

/// (utterance, hypothesis index) → score per model id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreTable {
    models: Vec<String>,
    scores: BTreeMap<ScoreKey, Vec<f64>>,
}

impl ScoreTable {
    pub fn new(models: Vec<String>) -> Self {
        Self { models, scores: BTreeMap::new() }
    }

    pub fn models(&self) -> &[String] {
        &self.models
    }

    pub fn insert(&mut self, utt: &str, index: u32, scores: Vec<f64>) -> Result<()> {
        if scores.len() != self.models.len() {
            return Err(TrfError::Shape(format!("{} scores for {} models", scores.len(), self.models.len())));
        }
        self.scores.insert((utt.to_string(), index), scores);
        Ok(())
    }

    pub fn get(&self, utt: &str, index: u32, model: &str) -> Option<f64> {
        let c = self.models.iter().position(|m| m == model)?;
        self.scores.get(&(utt.to_string(), index)).map(|s| s[c])
    }

    pub fn keys(&self) -> impl Iterator<Item = &ScoreKey> {
        self.scores.keys()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// The column used for selection: `avg` if present, else the only model.
    pub fn primary_model(&self) -> Result<&str> {
        if self.models.iter().any(|m| m == AVG_MODEL) {
            return Ok(AVG_MODEL);
        }
        match self.models.as_slice() {
            [only] => Ok(only),
            _ => Err(TrfError::Rescore("score table has several models and no average column".into())),
        }
    }

    /// CSV `utt_id,hyp_index,model_id,logprob`, preceded by a schema line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = w;
        writeln!(w, "{SCORE_SCHEMA}")?;
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["utt_id", "hyp_index", "model_id", "logprob"]).map_err(csv_err)?;
        for ((utt, idx), scores) in &self.scores {
            for (m, s) in self.models.iter().zip(scores) {
                csv.write_record([utt.as_str(), &idx.to_string(), m.as_str(), &format_score(*s)]).map_err(csv_err)?;
            }
        }
        csv.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["utt_id", "hyp_index", "model_id", "logprob"] {
            return Err(TrfError::Rescore(format!("unexpected score header {headers:?}")));
        }
        let mut models: Vec<String> = Vec::new();
        let mut cells: HashMap<(ScoreKey, usize), f64> = HashMap::new();
        let mut keys: Vec<ScoreKey> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let idx: u32 = rec[1].parse().map_err(|_| TrfError::Rescore(format!("bad hypothesis index {}", &rec[1])))?;
            let score = parse_score(&rec[3])?;
            let c = match models.iter().position(|m| m == &rec[2]) {
                Some(c) => c,
                None => {
                    models.push(rec[2].to_string());
                    models.len() - 1
                }
            };
            let key = (rec[0].to_string(), idx);
            if !keys.contains(&key) {
                keys.push(key.clone());
            }
            if cells.insert((key, c), score).is_some() {
                return Err(TrfError::Rescore(format!("duplicate score for {} {} {}", &rec[0], idx, &rec[2])));
            }
        }
        let mut table = ScoreTable::new(models.clone());
        for key in keys {
            let row = (0..models.len())
                .map(|c| {
                    cells.get(&(key.clone(), c)).copied().ok_or_else(|| {
                        TrfError::Rescore(format!("missing score for {} {} {}", key.0, key.1, models[c]))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            table.insert(&key.0, key.1, row)?;
        }
        Ok(table)
    }
}

fn csv_err(e: csv::Error) -> TrfError {
    TrfError::Rescore(e.to_string())
}

fn format_score(s: f64) -> String {
    if s == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{s}")
    }
}

fn parse_score(s: &str) -> Result<f64> {
    match s {
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s.parse().map_err(|_| TrfError::Rescore(format!("bad score {s}"))),
    }
}

/// Scores every hypothesis with every model, plus an `avg` column holding
/// the per-hypothesis mean. Hypotheses longer than a model's maximum length
/// score -inf with a warning.
pub fn rescore(nbest: &NBestSet, models: &[(String, &TrfModel)]) -> Result<ScoreTable> {
    if nbest.is_empty() {
        return Err(TrfError::Rescore("empty n-best list".into()));
    }
    if models.is_empty() {
        return Err(TrfError::Rescore("no models to rescore with".into()));
    }
    let flat: Vec<(&str, &Hypothesis)> =
        nbest.utterances().flat_map(|(u, hs)| hs.iter().map(move |h| (u, h))).collect();
    let rows: Vec<Result<Vec<f64>>> = par::map(&flat, |(utt, h)| {
        models
            .iter()
            .map(|(_, model)| {
                let ids: Vec<u32> = h.text.split_whitespace().map(|t| model.vocab.id(t)).collect();
                if ids.is_empty() || ids.len() > model.max_len() {
                    log::warn!("{utt} hypothesis {}: length {} outside 1..={}; scored -inf", h.index, ids.len(), model.max_len());
                    return Ok(f64::NEG_INFINITY);
                }
                model.sentence_logprob(&ids)
            })
            .collect()
    });
    let mut names: Vec<String> = models.iter().map(|(n, _)| n.clone()).collect();
    names.push(AVG_MODEL.to_string());
    let mut table = ScoreTable::new(names);
    for ((utt, h), row) in flat.iter().zip(rows) {
        let mut row = row?;
        let avg = row.iter().sum::<f64>() / row.len() as f64;
        row.push(avg);
        table.insert(utt, h.index, row)?;
    }
    Ok(table)
}

/// `weight · a + (1 - weight) · b` on the primary column of each table.
pub fn interpolate(a: &ScoreTable, b: &ScoreTable, weight: f64) -> Result<ScoreTable> {
    if !(0.0..=1.0).contains(&weight) {
        return Err(TrfError::Domain(format!("interpolation weight {weight} outside [0, 1]")));
    }
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(TrfError::Rescore("score tables cover different hypotheses".into()));
    }
    let (ma, mb) = (a.primary_model()?, b.primary_model()?);
    let mut out = ScoreTable::new(vec![AVG_MODEL.to_string()]);
    for (utt, idx) in a.keys() {
        let sa = a.get(utt, *idx, ma).expect("key present");
        let sb = b.get(utt, *idx, mb).expect("key present");
        // Equal scores pass through exactly, so interpolating a table with
        // itself is the identity.
        let s = if weight == 1.0 || sa == sb {
            sa
        } else if weight == 0.0 {
            sb
        } else {
            weight * sa + (1.0 - weight) * sb
        };
        out.insert(utt, *idx, vec![s])?;
    }
    Ok(out)
}

/// Per utterance, the hypothesis maximising `lm + acoustic_weight · am`
/// (the acoustic term is skipped when absent). Ties go to the lowest index.
pub fn select_best<'a>(
    nbest: &'a NBestSet,
    scores: &ScoreTable,
    acoustic_weight: f64,
) -> Result<BTreeMap<String, &'a Hypothesis>> {
    let model = scores.primary_model()?;
    let mut out = BTreeMap::new();
    for (utt, hyps) in nbest.utterances() {
        let mut best: Option<(f64, &Hypothesis)> = None;
        for h in hyps {
            let lm = scores
                .get(utt, h.index, model)
                .ok_or_else(|| TrfError::Rescore(format!("no score for {utt} hypothesis {}", h.index)))?;
            let total = match h.acoustic {
                Some(am) if acoustic_weight != 0.0 => lm + acoustic_weight * am,
                _ => lm,
            };
            let better = match best {
                None => true,
                Some((s, b)) => total > s || (total == s && h.index < b.index),
            };
            if better {
                best = Some((total, h));
            }
        }
        let (_, h) = best.ok_or_else(|| TrfError::Rescore(format!("utterance {utt} has no hypotheses")))?;
        out.insert(utt.to_string(), h);
    }
    Ok(out)
}

/// Reads `<utt_id> <token ...>` lines.
pub fn read_transcripts<R: BufRead>(r: R) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let mut f = line.split_whitespace();
        let Some(utt) = f.next() else { continue };
        let text = f.collect::<Vec<_>>().join(" ");
        if out.insert(utt.to_string(), text).is_some() {
            return Err(TrfError::Rescore(format!("line {}: duplicate utterance {utt}", n + 1)));
        }
    }
    Ok(out)
}

pub fn write_transcripts<W: Write>(mut w: W, t: &BTreeMap<String, String>) -> Result<()> {
    for (utt, text) in t {
        if text.is_empty() {
            writeln!(w, "{utt}")?;
        } else {
            writeln!(w, "{utt} {text}")?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Among
/// minimum-cost alignments, substitutions are preferred over
/// deletion+insertion pairs, then deletions over insertions.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, subs, dels, ins) per cell
    let mut prev: Vec<(usize, usize, usize, usize)> = (0..=m).map(|j| (j, 0, 0, j)).collect();
    for i in 1..=n {
        let mut cur = vec![(i, 0, i, 0); m + 1];
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let d = prev[j - 1];
            let diag = if same { d } else { (d.0 + 1, d.1 + 1, d.2, d.3) };
            let u = prev[j];
            let del = (u.0 + 1, u.1, u.2 + 1, u.3);
            let l = cur[j - 1];
            let ins = (l.0 + 1, l.1, l.2, l.3 + 1);
            cur[j] = [diag, del, ins].into_iter().min_by_key(|c| c.0).expect("three candidates");
        }
        prev = cur;
    }
    let (_, s, d, i) = prev[m];
    EditCounts { substitutions: s, deletions: d, insertions: i, ref_words: n }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WerReport {
    pub wer: f64,
    pub counts: EditCounts,
    pub utterances: usize,
}

/// Corpus WER `(S + D + I) / reference words`.
pub fn wer(hyps: &BTreeMap<String, String>, refs: &BTreeMap<String, String>) -> Result<WerReport> {
    if refs.is_empty() {
        return Err(TrfError::Rescore("no references".into()));
    }
    if let Some(k) = refs.keys().find(|k| !hyps.contains_key(*k)) {
        return Err(TrfError::Rescore(format!("no hypothesis for utterance {k}")));
    }
    if let Some(k) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        return Err(TrfError::Rescore(format!("no reference for utterance {k}")));
    }
    let mut total = EditCounts::default();
    for (utt, r) in refs {
        let rw: Vec<&str> = r.split_whitespace().collect();
        let hw: Vec<&str> = hyps[utt].split_whitespace().collect();
        let c = align(&rw, &hw);
        total.substitutions += c.substitutions;
        total.deletions += c.deletions;
        total.insertions += c.insertions;
        total.ref_words += c.ref_words;
    }
    if total.ref_words == 0 {
        return Err(TrfError::Rescore("references contain no words".into()));
    }
    Ok(WerReport { wer: total.errors() as f64 / total.ref_words as f64, counts: total, utterances: refs.len() })
}
