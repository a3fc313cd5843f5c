//! Synthetic corpora over a closed vocabulary, dataset file I/O, and the
//! rules deriving auxiliary description text from gold annotations.
//!
//! Three generators share one world: entity and polarity pairs carry fixed
//! signature vectors that appear as image feature rows. `gen_mabsa` emits
//! aspect extraction, sentiment classification, and joint views of each
//! scene; `gen_label_choice` and `gen_description_choice` emit the two
//! pretraining tasks in which the gold span is the candidate segment that
//! matches the image.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::epe::{Polarity, Span};
use crate::rng::Rng;
use crate::{Error, Result};

const ENTITIES: [&str; 12] = [
    "pizza", "sushi", "laptop", "camera", "hotel", "garden", "river", "cinema", "museum",
    "bakery", "stadium", "harbor",
];
const MODIFIERS: [&str; 4] = ["old", "new", "tiny", "grand"];
const POS_CUES: [&str; 3] = ["good", "great", "nice"];
const NEG_CUES: [&str; 3] = ["bad", "poor", "awful"];
const NEU_CUES: [&str; 3] = ["plain", "okay", "average"];
const CANDIDATES: [&str; 3] = ["positive", "negative", "neutral"];
const FILLERS: [&str; 10] =
    ["the", "we", "saw", "visited", "near", "today", "and", "was", "quite", "really"];
const PROMPT_WORDS: [&str; 19] = [
    "extract", "all", "aspect", "terms", ".", "what", "is", "sentiment", "of", "?", "does",
    "this", "image", "contains", "provide", "a", "description", "for", ",",
];

pub const PAD_WORD: &str = "<pad>";

/// Stream tags for deriving independent generator streams from one seed.
fn stream_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x1000_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Closed whitespace vocabulary shared by every generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// The fixed vocabulary of the synthetic world; id 0 is the pad token.
    pub fn standard() -> Vocab {
        let mut words: Vec<String> = vec![PAD_WORD.to_string()];
        let groups: [&[&str]; 8] = [
            &ENTITIES, &MODIFIERS, &POS_CUES, &NEG_CUES, &NEU_CUES, &CANDIDATES, &FILLERS,
            &PROMPT_WORDS,
        ];
        for group in groups {
            for &w in group {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        Vocab::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Vocab {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Vocab { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization over the closed vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w).ok_or_else(|| {
                    Error::Usage(format!("word `{w}` is not in the vocabulary"))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&id| self.word(id)).collect::<Vec<_>>().join(" ")
    }
}

/// The task a record belongs to, recovered from its id prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Mate,
    Masc,
    Jmasa,
    LabelChoice,
    DescChoice,
}

impl Task {
    pub fn prefix(self) -> &'static str {
        match self {
            Task::Mate => "mate",
            Task::Masc => "masc",
            Task::Jmasa => "jmasa",
            Task::LabelChoice => "label",
            Task::DescChoice => "desc",
        }
    }
}

/// One dataset record: a tokenized text, its gold spans, the prompt that
/// queries them, and an optional image reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<u32>,
    pub spans: Vec<Span>,
    pub prompt: Vec<u32>,
    pub image_ref: Option<String>,
}

impl Example {
    pub fn task(&self) -> Result<Task> {
        let prefix = self.id.split('-').next().unwrap_or("");
        match prefix {
            "mate" => Ok(Task::Mate),
            "masc" => Ok(Task::Masc),
            "jmasa" => Ok(Task::Jmasa),
            "label" => Ok(Task::LabelChoice),
            "desc" => Ok(Task::DescChoice),
            _ => Err(Error::Usage(format!("id `{}` has no recognized task prefix", self.id))),
        }
    }
}

/// Raw image feature matrix, rows by feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub vocab: Vocab,
    pub examples: Vec<Example>,
    pub images: BTreeMap<String, ImageMatrix>,
}

impl Dataset {
    pub fn image(&self, ex: &Example) -> Option<&ImageMatrix> {
        ex.image_ref.as_ref().and_then(|r| self.images.get(r))
    }

    pub fn task_indices(&self, task: Task) -> Vec<usize> {
        (0..self.examples.len())
            .filter(|&i| self.examples[i].task().ok() == Some(task))
            .collect()
    }
}

/// Parameters of the synthetic world. The ambiguity rate is the probability
/// that an aspect's sentiment cue is omitted from the text and recoverable
/// only from the image signature.
#[derive(Clone, Debug)]
pub struct SyntheticWorldSpec {
    pub entity_count: usize,
    pub ambiguity: f64,
    pub noise: f64,
    pub d_raw: usize,
    pub l_i: usize,
    pub seed: u64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            entity_count: 12,
            ambiguity: 0.5,
            noise: 0.2,
            d_raw: 16,
            l_i: 8,
            seed: 0,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.entity_count == 0 || self.entity_count > ENTITIES.len() {
            return Err(Error::config(
                "entity_count",
                format!("must be in 1..={}", ENTITIES.len()),
            ));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::config("ambiguity", "must be within [0, 1]"));
        }
        if self.noise < 0.0 {
            return Err(Error::config("noise", "must be nonnegative"));
        }
        if self.d_raw == 0 || self.l_i == 0 {
            return Err(Error::config("d_raw", "image geometry must be positive"));
        }
        Ok(())
    }

    /// Fixed per-(entity, polarity) signature vectors: the sum of a fixed
    /// entity vector and a fixed polarity vector, shared by all splits
    /// generated from the same seed.
    fn signatures(&self) -> Vec<Vec<Vec<f64>>> {
        let mut rng = Rng::new(stream_seed(self.seed, "signatures"));
        let entity: Vec<Vec<f64>> = (0..self.entity_count)
            .map(|_| (0..self.d_raw).map(|_| rng.normal(0.0, 1.0)).collect())
            .collect();
        let polarity: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..self.d_raw).map(|_| rng.normal(0.0, 1.0)).collect())
            .collect();
        entity
            .iter()
            .map(|e| {
                polarity
                    .iter()
                    .map(|p| e.iter().zip(p).map(|(a, b)| a + b).collect())
                    .collect()
            })
            .collect()
    }
}

struct WorldGen<'a> {
    spec: &'a SyntheticWorldSpec,
    vocab: Vocab,
    signatures: Vec<Vec<Vec<f64>>>,
    rng: Rng,
}

impl<'a> WorldGen<'a> {
    fn new(spec: &'a SyntheticWorldSpec, stream: &str) -> Result<WorldGen<'a>> {
        spec.validate()?;
        Ok(WorldGen {
            spec,
            vocab: Vocab::standard(),
            signatures: spec.signatures(),
            rng: Rng::new(stream_seed(spec.seed, stream)),
        })
    }

    fn ids(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.vocab.id(w).expect("fixed word missing")).collect()
    }

    fn polarity(idx: usize) -> Polarity {
        Polarity::ALL[idx]
    }

    fn cue(&mut self, p: Polarity) -> &'static str {
        let cues = match p {
            Polarity::Pos => &POS_CUES,
            Polarity::Neg => &NEG_CUES,
            Polarity::Neu => &NEU_CUES,
        };
        cues[self.rng.below(3)]
    }

    /// Image with one signature row per scene aspect and noise elsewhere.
    fn image(&mut self, aspects: &[(usize, Polarity)]) -> ImageMatrix {
        let (l_i, d_raw, noise) = (self.spec.l_i, self.spec.d_raw, self.spec.noise);
        assert!(aspects.len() <= l_i, "more aspects than image rows");
        let mut data = Vec::with_capacity(l_i * d_raw);
        for row in 0..l_i {
            for col in 0..d_raw {
                let base = aspects.get(row).map_or(0.0, |&(e, p)| {
                    self.signatures[e][p as usize][col]
                });
                data.push(base + self.rng.normal(0.0, noise));
            }
        }
        ImageMatrix { rows: l_i, cols: d_raw, data }
    }
}

/// Aspect extraction, per-aspect sentiment, and joint views of `n` scenes.
/// The stream tag keeps different splits on independent draw sequences while
/// sharing the same world signatures.
pub fn gen_mabsa(spec: &SyntheticWorldSpec, n: usize, stream: &str) -> Result<Dataset> {
    let mut w = WorldGen::new(spec, stream)?;
    let mut examples = Vec::new();
    let mut images = BTreeMap::new();
    let mate_prompt = w.ids(&["extract", "all", "aspect", "terms", "."]);
    let candidate_ids = w.ids(&CANDIDATES);

    for i in 0..n {
        // At most one aspect per image feature row.
        let k = 1 + w.rng.below(3.min(spec.l_i));
        let mut entity_order: Vec<usize> = (0..spec.entity_count).collect();
        w.rng.shuffle(&mut entity_order);
        let aspects: Vec<(usize, Polarity)> = entity_order[..k]
            .iter()
            .map(|&e| (e, WorldGen::polarity(w.rng.below(3))))
            .collect();

        let mut tokens: Vec<u32> = Vec::new();
        let filler = |w: &mut WorldGen, tokens: &mut Vec<u32>| {
            let word = FILLERS[w.rng.below(FILLERS.len())];
            tokens.push(w.vocab.id(word).unwrap());
        };
        filler(&mut w, &mut tokens);
        let mut gold: Vec<(Span, Vec<u32>)> = Vec::new();
        for &(e, p) in &aspects {
            if w.rng.chance(1.0 - spec.ambiguity) {
                let cue = w.cue(p);
                tokens.push(w.vocab.id(cue).unwrap());
            }
            let mut phrase: Vec<u32> = Vec::new();
            if w.rng.chance(0.5) {
                phrase.push(w.vocab.id(MODIFIERS[w.rng.below(MODIFIERS.len())]).unwrap());
            }
            phrase.push(w.vocab.id(ENTITIES[e]).unwrap());
            let start = tokens.len();
            tokens.extend(&phrase);
            gold.push((Span::labeled(start, tokens.len() - 1, p), phrase));
            filler(&mut w, &mut tokens);
        }

        let image_ref = format!("{stream}-img-{i:06}");
        images.insert(image_ref.clone(), w.image(&aspects));

        examples.push(Example {
            id: format!("mate-{stream}-{i:06}"),
            tokens: tokens.clone(),
            spans: gold.iter().map(|(s, _)| Span::new(s.start, s.end)).collect(),
            prompt: mate_prompt.clone(),
            image_ref: Some(image_ref.clone()),
        });

        for (a, (span, phrase)) in gold.iter().enumerate() {
            let mut masc_tokens = tokens.clone();
            let base = masc_tokens.len();
            masc_tokens.extend(&candidate_ids);
            let p = span.label.unwrap();
            let mut prompt = w.ids(&["what", "is", "the", "sentiment", "of"]);
            prompt.extend(phrase);
            prompt.push(w.vocab.id("?").unwrap());
            examples.push(Example {
                id: format!("masc-{stream}-{i:06}-{a}"),
                tokens: masc_tokens,
                spans: vec![Span::labeled(base + p as usize, base + p as usize, p)],
                prompt,
                image_ref: Some(image_ref.clone()),
            });
        }

        examples.push(Example {
            id: format!("jmasa-{stream}-{i:06}"),
            tokens,
            spans: gold.iter().map(|(s, _)| *s).collect(),
            prompt: mate_prompt.clone(),
            image_ref: Some(image_ref),
        });
    }
    Ok(Dataset { vocab: w.vocab, examples, images })
}

/// Label-choice pretraining: ten candidate entity names, one matching the
/// image; the gold span is the correct name's occurrence.
pub fn gen_label_choice(spec: &SyntheticWorldSpec, n: usize, stream: &str) -> Result<Dataset> {
    if spec.entity_count < 10 {
        return Err(Error::config("entity_count", "label choice needs at least 10 entities"));
    }
    let mut w = WorldGen::new(spec, stream)?;
    let mut examples = Vec::new();
    let mut images = BTreeMap::new();
    let prompt = w.ids(&["what", "does", "this", "image", "contains", "."]);
    let comma = w.vocab.id(",").unwrap();

    for i in 0..n {
        let correct = w.rng.below(spec.entity_count);
        let p = WorldGen::polarity(w.rng.below(3));
        let mut order: Vec<usize> = (0..spec.entity_count).filter(|&e| e != correct).collect();
        w.rng.shuffle(&mut order);
        let mut candidates: Vec<usize> = order[..9].to_vec();
        candidates.push(correct);
        w.rng.shuffle(&mut candidates);

        let mut tokens = Vec::new();
        let mut gold = None;
        for (pos, &e) in candidates.iter().enumerate() {
            if pos > 0 {
                tokens.push(comma);
            }
            if e == correct {
                gold = Some(Span::new(tokens.len(), tokens.len()));
            }
            tokens.push(w.vocab.id(ENTITIES[e]).unwrap());
        }

        let image_ref = format!("{stream}-img-{i:06}");
        images.insert(image_ref.clone(), w.image(&[(correct, p)]));
        examples.push(Example {
            id: format!("label-{stream}-{i:06}"),
            tokens,
            spans: vec![gold.unwrap()],
            prompt: prompt.clone(),
            image_ref: Some(image_ref),
        });
    }
    Ok(Dataset { vocab: w.vocab, examples, images })
}

/// Description-choice pretraining: each segment names an entity with an
/// optional modifier and appends its sentiment cue; segments are separated
/// by a comma or a filler word. One segment matches the image among three
/// mismatched ones, and the gold span is the matching segment.
pub fn gen_description_choice(spec: &SyntheticWorldSpec, n: usize, stream: &str) -> Result<Dataset> {
    let mut w = WorldGen::new(spec, stream)?;
    let mut examples = Vec::new();
    let mut images = BTreeMap::new();
    let prompt = w.ids(&["provide", "a", "description", "for", "image", "."]);
    let comma = w.vocab.id(",").unwrap();

    for i in 0..n {
        let e = w.rng.below(spec.entity_count);
        let p = WorldGen::polarity(w.rng.below(3));
        let mut segments: Vec<(usize, Polarity)> = vec![(e, p)];
        while segments.len() < 4 {
            let fe = w.rng.below(spec.entity_count);
            let fp = WorldGen::polarity(w.rng.below(3));
            if (fe, fp) != (e, p) && !segments.contains(&(fe, fp)) {
                segments.push((fe, fp));
            }
        }
        w.rng.shuffle(&mut segments);

        let mut tokens = Vec::new();
        let mut gold = None;
        for (pos, &(se, sp)) in segments.iter().enumerate() {
            if pos > 0 {
                if w.rng.chance(0.5) {
                    tokens.push(comma);
                } else {
                    tokens.push(w.vocab.id(FILLERS[w.rng.below(FILLERS.len())]).unwrap());
                }
            }
            let start = tokens.len();
            if w.rng.chance(0.5) {
                tokens.push(w.vocab.id(MODIFIERS[w.rng.below(MODIFIERS.len())]).unwrap());
            }
            tokens.push(w.vocab.id(ENTITIES[se]).unwrap());
            let cue = w.cue(sp);
            tokens.push(w.vocab.id(cue).unwrap());
            if (se, sp) == (e, p) {
                gold = Some(Span::new(start, tokens.len() - 1));
            }
        }

        let image_ref = format!("{stream}-img-{i:06}");
        images.insert(image_ref.clone(), w.image(&[(e, p)]));
        examples.push(Example {
            id: format!("desc-{stream}-{i:06}"),
            tokens,
            spans: vec![gold.unwrap()],
            prompt: prompt.clone(),
            image_ref: Some(image_ref),
        });
    }
    Ok(Dataset { vocab: w.vocab, examples, images })
}

/// Deterministic description text for the matching and contrastive
/// objectives, derived from a record's own gold annotation: the gold span
/// tokens, and for sentiment records the queried aspect (taken from the
/// prompt) ahead of the gold candidate word.
pub fn derived_description(ex: &Example) -> Vec<u32> {
    let mut out = Vec::new();
    match ex.task() {
        Ok(Task::Masc) if ex.prompt.len() > 6 => {
            out.extend(&ex.prompt[5..ex.prompt.len() - 1]);
        }
        _ => {}
    }
    for span in &ex.spans {
        out.extend(&ex.tokens[span.start..=span.end]);
    }
    if out.is_empty() {
        out.extend(ex.tokens.iter().take(1));
    }
    out
}

/// Positions of the sentiment candidate words in a record's text, with the
/// polarity each stands for.
pub fn candidate_positions(ex: &Example, vocab: &Vocab) -> Vec<(usize, Polarity)> {
    let mut out = Vec::new();
    for (pos, &tok) in ex.tokens.iter().enumerate() {
        for (c, &word) in CANDIDATES.iter().enumerate() {
            if vocab.id(word) == Some(tok) {
                out.push((pos, Polarity::ALL[c]));
            }
        }
    }
    out
}

/// Formats spans as the comma-separated `start:end:LABEL` record field.
pub fn span_field(spans: &[Span]) -> String {
    let mut s = String::new();
    for (i, span) in spans.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let label = span.label.map_or("NONE", |p| p.as_str());
        let _ = write!(s, "{}:{}:{}", span.start, span.end, label);
    }
    s
}

fn parse_span_field(path: &str, line: usize, field: &str) -> Result<Vec<Span>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    let bad = |message: String| Error::Parse {
        path: path.to_string(),
        line,
        field: "spans".to_string(),
        message,
    };
    field
        .split(',')
        .map(|part| {
            let pieces: Vec<&str> = part.split(':').collect();
            if pieces.len() != 3 {
                return Err(bad(format!("`{part}` is not start:end:label")));
            }
            let start: usize =
                pieces[0].parse().map_err(|_| bad(format!("bad start in `{part}`")))?;
            let end: usize =
                pieces[1].parse().map_err(|_| bad(format!("bad end in `{part}`")))?;
            if start > end {
                return Err(bad(format!("start exceeds end in `{part}`")));
            }
            let label = match pieces[2] {
                "NONE" => None,
                other => Some(
                    Polarity::parse(other)
                        .ok_or_else(|| bad(format!("unknown polarity `{other}`")))?,
                ),
            };
            Ok(Span { start, end, label })
        })
        .collect()
}

fn format_f64(v: f64) -> String {
    // f64 Display is shortest-round-trip decimal notation, never scientific.
    format!("{v}")
}

/// Serializes a dataset into a directory: `vocab.txt`, `records.txt`, and one
/// `images/<ref>.csv` per image.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let vocab_text = ds.vocab.words().join("\n") + "\n";
    crate::write_atomic(&dir.join("vocab.txt"), vocab_text.as_bytes())?;

    let mut records = String::new();
    for ex in &ds.examples {
        let _ = writeln!(
            records,
            "id={}\ttokens={}\tspans={}\tprompt={}\timage_ref={}",
            ex.id,
            ds.vocab.decode(&ex.tokens),
            span_field(&ex.spans),
            ds.vocab.decode(&ex.prompt),
            ex.image_ref.as_deref().unwrap_or("none"),
        );
    }
    crate::write_atomic(&dir.join("records.txt"), records.as_bytes())?;

    for (id, img) in &ds.images {
        let mut csv = String::new();
        for r in 0..img.rows {
            let row: Vec<String> = (0..img.cols)
                .map(|c| format_f64(img.data[r * img.cols + c]))
                .collect();
            let _ = writeln!(csv, "{}", row.join(","));
        }
        crate::write_atomic(&dir.join("images").join(format!("{id}.csv")), csv.as_bytes())?;
    }
    Ok(())
}

/// Loads a dataset directory written by `save_dataset`. Malformed records
/// report the file, line, and field.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab_path = dir.join("vocab.txt");
    if !vocab_path.exists() {
        return Err(Error::MissingFile(vocab_path));
    }
    let vocab_text =
        std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let vocab = Vocab::from_words(vocab_text.lines().map(str::to_string).collect());

    let records_path = dir.join("records.txt");
    if !records_path.exists() {
        return Err(Error::MissingFile(records_path));
    }
    let records_text =
        std::fs::read_to_string(&records_path).map_err(|e| Error::io(&records_path, e))?;
    let path_str = records_path.display().to_string();

    let mut examples = Vec::new();
    let mut images = BTreeMap::new();
    for (lineno, line) in records_text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields: HashMap<&str, &str> = HashMap::new();
        for piece in line.split('\t') {
            let (key, value) = piece.split_once('=').ok_or_else(|| Error::Parse {
                path: path_str.clone(),
                line: line_no,
                field: piece.to_string(),
                message: "expected key=value".to_string(),
            })?;
            fields.insert(key, value);
        }
        let get = |key: &str| -> Result<&str> {
            fields.get(key).copied().ok_or_else(|| Error::Parse {
                path: path_str.clone(),
                line: line_no,
                field: key.to_string(),
                message: "field missing".to_string(),
            })
        };
        let encode = |key: &str, text: &str| -> Result<Vec<u32>> {
            vocab.encode(text).map_err(|e| Error::Parse {
                path: path_str.clone(),
                line: line_no,
                field: key.to_string(),
                message: e.to_string(),
            })
        };
        let tokens = encode("tokens", get("tokens")?)?;
        let spans = parse_span_field(&path_str, line_no, get("spans")?)?;
        for span in &spans {
            if span.end >= tokens.len() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    line: line_no,
                    field: "spans".to_string(),
                    message: format!(
                        "span ({},{}) outside a {}-token text",
                        span.start,
                        span.end,
                        tokens.len()
                    ),
                });
            }
        }
        let image_ref = match get("image_ref")? {
            "none" => None,
            other => Some(other.to_string()),
        };
        examples.push(Example {
            id: get("id")?.to_string(),
            tokens,
            spans,
            prompt: encode("prompt", get("prompt")?)?,
            image_ref,
        });
    }

    for ex in &examples {
        if let Some(ref id) = ex.image_ref {
            if images.contains_key(id) {
                continue;
            }
            let img_path = dir.join("images").join(format!("{id}.csv"));
            if !img_path.exists() {
                return Err(Error::MissingFile(img_path));
            }
            let text = std::fs::read_to_string(&img_path).map_err(|e| Error::io(&img_path, e))?;
            let mut data = Vec::new();
            let mut cols = 0;
            let mut rows = 0;
            for (lineno, line) in text.lines().enumerate() {
                let entries: Vec<&str> = line.split(',').collect();
                if rows == 0 {
                    cols = entries.len();
                } else if entries.len() != cols {
                    return Err(Error::Parse {
                        path: img_path.display().to_string(),
                        line: lineno + 1,
                        field: "row".to_string(),
                        message: format!("expected {cols} entries, found {}", entries.len()),
                    });
                }
                for entry in entries {
                    data.push(entry.parse::<f64>().map_err(|_| Error::Parse {
                        path: img_path.display().to_string(),
                        line: lineno + 1,
                        field: "value".to_string(),
                        message: format!("`{entry}` is not a number"),
                    })?);
                }
                rows += 1;
            }
            images.insert(id.clone(), ImageMatrix { rows, cols, data });
        }
    }
    Ok(Dataset { vocab, examples, images })
}
