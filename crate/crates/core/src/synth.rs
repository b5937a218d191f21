//! Synthetic multilingual corpus: per-language lexicons with a word bigram,
//! and per-character acoustic templates rendered into 80-dim frames.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::{FeatureMatrix, FeatureWriter, RAW_DIM};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const FRAME_MS: u32 = 10;
pub const LANGUAGES_FILE: &str = "languages.tsv";
pub const TRANSCRIPTS_FILE: &str = "transcripts.tsv";
pub const SPLITS: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

const MIN_UNIT_FRAMES: usize = 3;
const MAX_UNIT_FRAMES: usize = 5;
const PREFERRED_SUCCESSORS: usize = 3;
const PREFERRED_MASS: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Script {
    Alphabetic,
    Logographic,
}

impl std::fmt::Display for Script {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Script::Alphabetic => "alphabetic",
            Script::Logographic => "logographic",
        })
    }
}

impl std::str::FromStr for Script {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alphabetic" => Ok(Script::Alphabetic),
            "logographic" => Ok(Script::Logographic),
            _ => Err(Error::format("script", format!("unknown script {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::format("split", format!("unknown split {s:?}"))),
        }
    }
}

/// What the user chooses per language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageSpec {
    pub name: String,
    pub script: Script,
    pub utterances: usize,
    /// Inclusive range of words (characters for logographic text) per
    /// utterance.
    pub min_len: usize,
    pub max_len: usize,
    /// Character inventory; a built-in pool when absent.
    pub alphabet: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub languages: Vec<LanguageSpec>,
    /// Per-dimension std of the additive Gaussian noise on train and test.
    pub noise_sigma: f64,
    /// Raw frames each template frame is held for.
    pub hold_frames: usize,
    pub train_frac: f64,
    pub dev_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let lang = |name: &str, script, utterances, min_len, max_len| LanguageSpec {
            name: name.into(),
            script,
            utterances,
            min_len,
            max_len,
            alphabet: None,
        };
        Self {
            seed: 0,
            languages: vec![
                lang("xa", Script::Alphabetic, 1000, 2, 4),
                lang("xb", Script::Alphabetic, 600, 2, 4),
                lang("xc", Script::Logographic, 400, 3, 6),
            ],
            noise_sigma: 1.0,
            hold_frames: 2,
            train_frac: 0.8,
            dev_frac: 0.1,
        }
    }
}

/// Character pools, one per language slot. Pools are disjoint so no two
/// languages share a character.
const ALPHABETS: [&str; 4] = ["abcdefgh", "αβγδεζηθ", "абвгдежз", "ijklmnop"];
const LOGOGRAPHS: &str = "日月山川水火木金土天人口目手心田雨風花鳥魚竹石犬";
const WORDS_PER_LANGUAGE: usize = 24;

impl SynthConfig {
    /// Character inventory of every language, defaults resolved.
    pub fn inventories(&self) -> Vec<Vec<char>> {
        let mut next = 0;
        self.languages
            .iter()
            .map(|l| match (&l.alphabet, l.script) {
                (Some(a), _) => a.chars().collect(),
                (None, Script::Alphabetic) => {
                    next += 1;
                    ALPHABETS.get(next - 1).map_or(Vec::new(), |a| a.chars().collect())
                }
                (None, Script::Logographic) => LOGOGRAPHS.chars().collect(),
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::Config("at least one language is required".into()));
        }
        let defaults = |script| {
            self.languages
                .iter()
                .filter(|l| l.script == script && l.alphabet.is_none())
                .count()
        };
        if defaults(Script::Alphabetic) > ALPHABETS.len() || defaults(Script::Logographic) > 1 {
            return Err(Error::Config(format!(
                "without explicit alphabets at most {} alphabetic and 1 logographic languages are supported",
                ALPHABETS.len()
            )));
        }
        let inventories = self.inventories();
        for (i, l) in self.languages.iter().enumerate() {
            let inv = &inventories[i];
            let unique: HashSet<char> = inv.iter().copied().collect();
            if inv.len() < 2 || unique.len() != inv.len() {
                return Err(Error::Config(format!(
                    "{} needs at least 2 distinct characters",
                    l.name
                )));
            }
            if let Some(c) = inv
                .iter()
                .find(|c| c.is_whitespace() || **c == crate::tokenizer::WORD_MARKER || c.to_lowercase().ne([**c]))
            {
                return Err(Error::Config(format!("{}: unusable character {c:?}", l.name)));
            }
            for (j, other) in inventories.iter().enumerate().take(i) {
                if let Some(c) = inv.iter().find(|c| other.contains(c)) {
                    return Err(Error::Config(format!(
                        "inventories of {} and {} overlap on {c:?}",
                        self.languages[j].name, l.name
                    )));
                }
            }
        }
        let mut names = HashSet::new();
        for l in &self.languages {
            if l.name.is_empty() || l.name.contains(['\t', '\n', '-']) {
                return Err(Error::Config(format!("bad language name {:?}", l.name)));
            }
            if !names.insert(&l.name) {
                return Err(Error::Config(format!("duplicate language {}", l.name)));
            }
            if l.min_len == 0 || l.min_len > l.max_len {
                return Err(Error::Config(format!("bad length range for {}", l.name)));
            }
        }
        if self.hold_frames == 0 {
            return Err(Error::Config("hold_frames must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be a non-negative number".into()));
        }
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.train_frac) || !ok(self.dev_frac) || self.train_frac + self.dev_frac > 1.0 {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }
}

impl SynthConfig {
    /// Parse a corpus spec. Top-level keys override the defaults; a
    /// `[[language]]` array, when present, replaces the default languages.
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("bad corpus spec: {e}")))?;
        let mut cfg = Self::default();
        let num = |k: &str, v: &toml::Value| {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| Error::Config(format!("{k} must be a number")))
        };
        let int = |k: &str, v: &toml::Value| {
            v.as_integer()
                .and_then(|i| usize::try_from(i).ok())
                .ok_or_else(|| Error::Config(format!("{k} must be a non-negative integer")))
        };
        for (k, v) in &doc {
            match k.as_str() {
                "seed" => cfg.seed = int(k, v)? as u64,
                "noise_sigma" => cfg.noise_sigma = num(k, v)?,
                "hold_frames" => cfg.hold_frames = int(k, v)?,
                "train_frac" => cfg.train_frac = num(k, v)?,
                "dev_frac" => cfg.dev_frac = num(k, v)?,
                "language" => {
                    let arr = v
                        .as_array()
                        .ok_or_else(|| Error::Config("language must be an array of tables".into()))?;
                    cfg.languages = arr
                        .iter()
                        .map(|t| {
                            let t = t
                                .as_table()
                                .ok_or_else(|| Error::Config("language entries must be tables".into()))?;
                            let mut l = LanguageSpec {
                                name: String::new(),
                                script: Script::Alphabetic,
                                utterances: 100,
                                min_len: 2,
                                max_len: 4,
                                alphabet: None,
                            };
                            for (k, v) in t {
                                let str_of = |v: &toml::Value| {
                                    v.as_str()
                                        .map(str::to_string)
                                        .ok_or_else(|| Error::Config(format!("language.{k} must be a string")))
                                };
                                match k.as_str() {
                                    "name" => l.name = str_of(v)?,
                                    "script" => {
                                        l.script = str_of(v)?.parse().map_err(|e: Error| Error::Config(e.to_string()))?
                                    }
                                    "utterances" => l.utterances = int(k, v)?,
                                    "min_len" => l.min_len = int(k, v)?,
                                    "max_len" => l.max_len = int(k, v)?,
                                    "alphabet" => l.alphabet = Some(str_of(v)?),
                                    _ => return Err(Error::Config(format!("unknown key language.{k}"))),
                                }
                            }
                            Ok(l)
                        })
                        .collect::<Result<_>>()?;
                }
                _ => return Err(Error::Config(format!("unknown corpus spec key {k:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective spec; parses back to an equal config.
    pub fn to_toml(&self) -> String {
        let mut s = format!(
            "seed = {}\nnoise_sigma = {:?}\nhold_frames = {}\ntrain_frac = {:?}\ndev_frac = {:?}\n",
            self.seed, self.noise_sigma, self.hold_frames, self.train_frac, self.dev_frac
        );
        for l in &self.languages {
            s.push_str(&format!(
                "\n[[language]]\nname = {:?}\nscript = \"{}\"\nutterances = {}\nmin_len = {}\nmax_len = {}\n",
                l.name, l.script, l.utterances, l.min_len, l.max_len
            ));
            if let Some(a) = &l.alphabet {
                s.push_str(&format!("alphabet = {a:?}\n"));
            }
        }
        s
    }
}

/// Acoustic unit: one character, in its word-initial or inner form.
/// Rendering holds each template frame for `hold_frames` raw frames.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitTemplate {
    pub ch: char,
    pub initial: bool,
    pub language: usize,
    /// `[L, 80]`, L in 3..=5.
    pub frames: Vec<Vec<f64>>,
}

/// Generated grammar and acoustics of one language.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub spec: LanguageSpec,
    pub alphabet: Vec<char>,
    /// Words; single characters for logographic text.
    pub words: Vec<String>,
    /// `start[w]`: probability of opening with word `w`.
    pub start: Vec<f64>,
    /// `bigram[a][b]`: probability of `b` following `a`.
    pub bigram: Vec<Vec<f64>>,
}

impl LanguageModel {
    fn sample_text(&self, rng: &mut SeededRng) -> String {
        let n = rng.inclusive(self.spec.min_len, self.spec.max_len);
        let mut w = rng.categorical(&self.start);
        let mut out = vec![self.words[w].clone()];
        for _ in 1..n {
            w = rng.categorical(&self.bigram[w]);
            out.push(self.words[w].clone());
        }
        match self.spec.script {
            Script::Alphabetic => out.join(" "),
            Script::Logographic => out.concat(),
        }
    }
}

/// Everything needed to render and to decode noiseless audio.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub languages: Vec<LanguageModel>,
    pub units: Vec<UnitTemplate>,
    pub hold_frames: usize,
}

fn successor_row(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut row = vec![(1.0 - PREFERRED_MASS) / n as f64; n];
    let k = PREFERRED_SUCCESSORS.min(n);
    let mut chosen = HashSet::new();
    while chosen.len() < k {
        chosen.insert(rng.below(n));
    }
    for c in chosen {
        row[c] += PREFERRED_MASS / k as f64;
    }
    row
}

impl World {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::stream(cfg.seed, 0);
        let mut languages = Vec::new();
        let mut units = Vec::new();
        let inventories = cfg.inventories();
        for (li, spec) in cfg.languages.iter().enumerate() {
            let (alphabet, words): (Vec<char>, Vec<String>) = match spec.script {
                Script::Alphabetic => {
                    let alphabet = inventories[li].clone();
                    let mut seen = HashSet::new();
                    let mut words = Vec::new();
                    while words.len() < WORDS_PER_LANGUAGE {
                        let len = rng.inclusive(3, 5);
                        let w: String = (0..len).map(|_| alphabet[rng.below(alphabet.len())]).collect();
                        if seen.insert(w.clone()) {
                            words.push(w);
                        }
                    }
                    (alphabet, words)
                }
                Script::Logographic => {
                    let alphabet = inventories[li].clone();
                    let words = alphabet.iter().map(|c| c.to_string()).collect();
                    (alphabet, words)
                }
            };
            let n = words.len();
            let start = successor_row(n, &mut rng);
            let bigram = (0..n).map(|_| successor_row(n, &mut rng)).collect();
            let forms: &[bool] = match spec.script {
                Script::Alphabetic => &[true, false],
                Script::Logographic => &[true],
            };
            for &ch in &alphabet {
                for &initial in forms {
                    let len = rng.inclusive(MIN_UNIT_FRAMES, MAX_UNIT_FRAMES);
                    let frames = (0..len).map(|_| (0..RAW_DIM).map(|_| rng.normal()).collect()).collect();
                    units.push(UnitTemplate {
                        ch,
                        initial,
                        language: li,
                        frames,
                    });
                }
            }
            languages.push(LanguageModel {
                spec: spec.clone(),
                alphabet,
                words,
                start,
                bigram,
            });
        }
        Ok(Self {
            languages,
            units,
            hold_frames: cfg.hold_frames,
        })
    }

    fn unit_index(&self, language: usize, ch: char, initial: bool) -> Option<usize> {
        let logographic = self.languages[language].spec.script == Script::Logographic;
        self.units
            .iter()
            .position(|u| u.language == language && u.ch == ch && (logographic || u.initial == initial))
    }

    /// Smallest Euclidean distance between any two template frames.
    pub fn min_template_distance(&self) -> f64 {
        let frames: Vec<&Vec<f64>> = self.units.iter().flat_map(|u| u.frames.iter()).collect();
        let mut best = f64::INFINITY;
        for i in 0..frames.len() {
            for j in i + 1..frames.len() {
                let d: f64 = frames[i].iter().zip(frames[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                best = best.min(d);
            }
        }
        best.sqrt()
    }

    /// Noiseless frames for `text` in `language`.
    pub fn render(&self, language: usize, text: &str) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        let mut initial = true;
        for ch in text.chars() {
            if ch == ' ' {
                initial = true;
                continue;
            }
            let u = self
                .unit_index(language, ch, initial)
                .ok_or_else(|| Error::invalid(format!("character {ch:?} is not in the language")))?;
            for f in &self.units[u].frames {
                for _ in 0..self.hold_frames {
                    out.push(f.clone());
                }
            }
            initial = false;
        }
        Ok(out)
    }

    /// Nearest-template segmentation by dynamic programming over all units.
    pub fn decode_noiseless(&self, frames: &Tensor) -> Result<String> {
        let t = frames.rows();
        if frames.cols() != RAW_DIM {
            return Err(Error::shape("decode_noiseless", "frames must be 80-dim"));
        }
        let mut cost = vec![f64::INFINITY; t + 1];
        let mut back: Vec<Option<usize>> = vec![None; t + 1];
        cost[0] = 0.0;
        for end in 1..=t {
            for (ui, u) in self.units.iter().enumerate() {
                let l = u.frames.len() * self.hold_frames;
                if l > end || !cost[end - l].is_finite() {
                    continue;
                }
                let mut c = cost[end - l];
                for k in 0..l {
                    let tf = &u.frames[k / self.hold_frames];
                    let row = frames.row(end - l + k);
                    c += row.iter().zip(tf).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                }
                if c < cost[end] {
                    cost[end] = c;
                    back[end] = Some(ui);
                }
            }
        }
        if !cost[t].is_finite() {
            return Err(Error::invalid("frames cannot be segmented into units"));
        }
        let mut seq = Vec::new();
        let mut pos = t;
        while pos > 0 {
            let ui = back[pos].expect("finite cost has a back pointer");
            seq.push(ui);
            pos -= self.units[ui].frames.len() * self.hold_frames;
        }
        seq.reverse();
        let mut text = String::new();
        for ui in seq {
            let u = &self.units[ui];
            let alphabetic = self.languages[u.language].spec.script == Script::Alphabetic;
            if alphabetic && u.initial && !text.is_empty() {
                text.push(' ');
            }
            text.push(u.ch);
        }
        Ok(text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub language: String,
    pub split: Split,
    pub text: String,
    pub features: FeatureMatrix,
}

/// Generate every utterance in memory. Dev audio is noiseless; train and
/// test carry Gaussian noise of std `noise_sigma`.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<(World, Vec<Utterance>)> {
    let world = World::generate(cfg)?;
    let mut out = Vec::new();
    for (li, lm) in world.languages.iter().enumerate() {
        let n = lm.spec.utterances;
        let n_train = (n as f64 * cfg.train_frac).round() as usize;
        let n_dev = ((n as f64 * cfg.dev_frac).round() as usize).min(n - n_train);
        let mut rng = SeededRng::stream(cfg.seed, 1 + li as u64);
        for i in 0..n {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            let text = lm.sample_text(&mut rng);
            let clean = world.render(li, &text)?;
            let sigma = if split == Split::Dev { 0.0 } else { cfg.noise_sigma };
            let t = clean.len();
            let mut data = Vec::with_capacity(t * RAW_DIM);
            for row in clean {
                for v in row {
                    data.push(if sigma > 0.0 { v + sigma * rng.normal() } else { v });
                }
            }
            let id = format!("{}-{i:05}", lm.spec.name);
            let frames = Tensor::matrix(t, RAW_DIM, data)?;
            out.push(Utterance {
                features: FeatureMatrix::new(frames, FRAME_MS, id.clone(), lm.spec.name.clone())?,
                id,
                language: lm.spec.name.clone(),
                split,
                text,
            });
        }
    }
    Ok((world, out))
}

/// Write `languages.tsv`, `transcripts.tsv` and one feature directory per
/// split under `dir`.
pub fn write_corpus(dir: &Path, world: &World, utts: &[Utterance]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut langs = fs::File::create(dir.join(LANGUAGES_FILE))?;
    for lm in &world.languages {
        writeln!(langs, "{}\t{}", lm.spec.name, lm.spec.script)?;
    }
    let mut tr = std::io::BufWriter::new(fs::File::create(dir.join(TRANSCRIPTS_FILE))?);
    for u in utts {
        writeln!(tr, "{}\t{}\t{}\t{}", u.id, u.language, u.split.name(), u.text)?;
    }
    tr.flush()?;
    for split in SPLITS {
        let mut w = FeatureWriter::create(&dir.join(split.name()))?;
        for u in utts.iter().filter(|u| u.split == split) {
            w.append(&u.features)?;
        }
        w.finish()?;
    }
    Ok(())
}

pub fn read_languages(dir: &Path) -> Result<Vec<(String, Script)>> {
    let text = fs::read_to_string(dir.join(LANGUAGES_FILE))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let (name, script) = l
                .split_once('\t')
                .ok_or_else(|| Error::format("languages.tsv", format!("bad line {l:?}")))?;
            Ok((name.to_string(), script.parse()?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TranscriptEntry {
    pub id: String,
    pub language: String,
    pub split: Split,
    pub text: String,
}

pub fn read_transcripts(dir: &Path) -> Result<Vec<TranscriptEntry>> {
    let text = fs::read_to_string(dir.join(TRANSCRIPTS_FILE))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.splitn(4, '\t').collect();
            if f.len() != 4 {
                return Err(Error::format("transcripts.tsv", format!("bad line {l:?}")));
            }
            Ok(TranscriptEntry {
                id: f[0].into(),
                language: f[1].into(),
                split: f[2].parse()?,
                text: f[3].into(),
            })
        })
        .collect()
}
