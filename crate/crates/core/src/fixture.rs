//! Seeded synthetic pseudo-language for desk-scale experiments.
//!
//! A [`World`] fixes a lexicon and a set of facts. Its text mixes three kinds
//! of content:
//! - grammatical structure: determiners and verb endings agree with the
//!   subject noun's class, verbs prefer objects of one class;
//! - world facts (`who lives where`, `who works as what`) restated across
//!   documents;
//! - random codes that can only be memorized.
//!
//! Held-out text comes from the same world, so structure and facts transfer
//! while memorized codes do not. That gap is what makes heavy repetition
//! hurt next-token training. [`World::tasks`] builds multiple-choice probes
//! of the transferable parts.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::evals::{EvalExample, Norm, TaskSpec};
use crate::seed::{self, Rng as SeedRng};
use crate::Result;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const CODE_ALPHABET: &[u8] = b"0123456789abcdefghjkmnpqrstuvwxyz";

/// Determiner, verb ending and adjective ending for each noun class.
const CLASS_MARKERS: [(&str, &str, &str); 3] =
    [("le", "an", "i"), ("na", "ol", "u"), ("tu", "ir", "e")];

#[derive(Debug, Clone, PartialEq)]
pub struct Noun {
    pub word: String,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verb {
    pub stem: String,
    /// Class of objects this verb takes most of the time.
    pub object_class: usize,
}

/// Sizes of the generated lexicon.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldShape {
    pub nouns: usize,
    pub verbs: usize,
    pub adjectives: usize,
    pub names: usize,
    pub places: usize,
    pub jobs: usize,
}

impl Default for WorldShape {
    fn default() -> Self {
        Self {
            nouns: 48,
            verbs: 24,
            adjectives: 16,
            names: 48,
            places: 12,
            jobs: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub nouns: Vec<Noun>,
    pub verbs: Vec<Verb>,
    pub adjectives: Vec<String>,
    pub names: Vec<String>,
    pub places: Vec<String>,
    pub jobs: Vec<String>,
    /// `home[i]` indexes `places` for `names[i]`.
    pub home: Vec<usize>,
    /// `job[i]` indexes `jobs` for `names[i]`.
    pub job: Vec<usize>,
}

fn fresh_word(
    rng: &mut SeedRng,
    syllables: usize,
    taken: &mut std::collections::HashSet<String>,
) -> String {
    loop {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONSONANTS.choose(rng).expect("nonempty") as char);
            w.push(*VOWELS.choose(rng).expect("nonempty") as char);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

impl World {
    pub fn new(shape: WorldShape, seed: u64) -> Self {
        let mut rng = seed::rng(seed, "fixture-world");
        let mut taken = std::collections::HashSet::new();
        for (d, v, a) in CLASS_MARKERS {
            taken.extend([d.to_string(), v.to_string(), a.to_string()]);
        }
        let nouns = (0..shape.nouns)
            .map(|i| Noun {
                word: fresh_word(&mut rng, 2, &mut taken),
                class: i % CLASS_MARKERS.len(),
            })
            .collect();
        let verbs = (0..shape.verbs)
            .map(|i| Verb {
                stem: fresh_word(&mut rng, 2, &mut taken),
                object_class: (i / 2) % CLASS_MARKERS.len(),
            })
            .collect();
        let adjectives = (0..shape.adjectives)
            .map(|_| fresh_word(&mut rng, 2, &mut taken))
            .collect();
        let cap = |w: String| {
            let mut c = w.chars();
            let first = c.next().expect("nonempty").to_ascii_uppercase();
            std::iter::once(first).chain(c).collect::<String>()
        };
        let names = (0..shape.names)
            .map(|_| cap(fresh_word(&mut rng, 3, &mut taken)))
            .collect();
        let places = (0..shape.places)
            .map(|_| cap(fresh_word(&mut rng, 2, &mut taken)))
            .collect();
        let jobs = (0..shape.jobs)
            .map(|_| fresh_word(&mut rng, 3, &mut taken))
            .collect();
        let home = (0..shape.names)
            .map(|_| rng.random_range(0..shape.places))
            .collect();
        let job = (0..shape.names)
            .map(|_| rng.random_range(0..shape.jobs))
            .collect();
        Self {
            nouns,
            verbs,
            adjectives,
            names,
            places,
            jobs,
            home,
            job,
        }
    }

    fn nouns_of(&self, class: usize) -> Vec<&Noun> {
        self.nouns.iter().filter(|n| n.class == class).collect()
    }

    /// `det [adj] noun`, agreeing with the noun's class.
    fn noun_phrase(&self, rng: &mut SeedRng, noun: &Noun) -> String {
        let (det, _, adj_end) = CLASS_MARKERS[noun.class];
        if rng.random_bool(0.4) {
            let adj = self.adjectives.choose(rng).expect("nonempty");
            format!("{det} {adj}{adj_end} {}", noun.word)
        } else {
            format!("{det} {}", noun.word)
        }
    }

    /// Subject, agreeing verb and (usually class-preferred) object.
    pub fn clause(&self, rng: &mut SeedRng) -> (String, usize) {
        let subj = self.nouns.choose(rng).expect("nonempty");
        let verb = self.verbs.choose(rng).expect("nonempty");
        let obj_class = if rng.random_bool(0.85) {
            verb.object_class
        } else {
            rng.random_range(0..CLASS_MARKERS.len())
        };
        let obj = *self.nouns_of(obj_class).choose(rng).expect("nonempty");
        let (_, ending, _) = CLASS_MARKERS[subj.class];
        let s = format!(
            "{} {}{ending} {}",
            self.noun_phrase(rng, subj),
            verb.stem,
            self.noun_phrase(rng, obj)
        );
        (s, subj.class)
    }

    fn sentence(&self, rng: &mut SeedRng) -> String {
        let roll: f64 = rng.random();
        if roll < 0.55 {
            let (c, _) = self.clause(rng);
            if rng.random_bool(0.3) {
                let (c2, _) = self.clause(rng);
                format!("{c} and {c2}.")
            } else {
                format!("{c}.")
            }
        } else if roll < 0.7 {
            let i = rng.random_range(0..self.names.len());
            format!("{} lives in {}.", self.names[i], self.places[self.home[i]])
        } else if roll < 0.8 {
            let i = rng.random_range(0..self.names.len());
            format!("{} works as a {}.", self.names[i], self.jobs[self.job[i]])
        } else {
            let code: String = (0..8)
                .map(|_| *CODE_ALPHABET.choose(rng).expect("nonempty") as char)
                .collect();
            let i = rng.random_range(0..self.names.len());
            format!("{} wrote code {}.", self.names[i], code)
        }
    }

    /// One document of `4..=9` sentences.
    pub fn document(&self, rng: &mut SeedRng) -> String {
        let n = rng.random_range(4..=9);
        (0..n)
            .map(|_| self.sentence(rng))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Documents totalling at least `min_bytes` bytes.
    pub fn corpus(&self, min_bytes: usize, seed: u64) -> Vec<String> {
        let mut rng = seed::rng(seed, "fixture-corpus");
        let mut docs = Vec::new();
        let mut bytes = 0;
        while bytes < min_bytes {
            let d = self.document(&mut rng);
            bytes += d.len() + 1;
            docs.push(d);
        }
        docs
    }

    fn example(context: String, completions: Vec<String>, gold: usize, norm: Norm) -> EvalExample {
        EvalExample {
            context,
            completions,
            gold,
            uncond_context: "Answer:".into(),
            norm,
            subtask: None,
        }
    }

    /// Multiple-choice probes of the learnable parts of the world, each with
    /// `per_task` examples:
    /// - `agreement`: a fresh sentence against the same sentence with the
    ///   wrong verb ending (no context, raw log-likelihood);
    /// - `residence`: `NAME lives in` completed by the true place or three
    ///   others (PMI);
    /// - `occupation`: same for jobs (character-length normalized);
    /// - `objects`: subject and verb followed by a preferred-class object or
    ///   three dispreferred ones (character-length normalized).
    pub fn tasks(&self, per_task: usize, seed: u64) -> Result<Vec<TaskSpec>> {
        let mut rng = seed::rng(seed, "fixture-tasks");
        let mut agreement = Vec::with_capacity(per_task);
        for _ in 0..per_task {
            let subj = self.nouns.choose(&mut rng).expect("nonempty");
            let verb = self.verbs.choose(&mut rng).expect("nonempty");
            let obj = *self
                .nouns_of(verb.object_class)
                .choose(&mut rng)
                .expect("nonempty");
            let wrong =
                (subj.class + rng.random_range(1..CLASS_MARKERS.len())) % CLASS_MARKERS.len();
            let np_s = self.noun_phrase(&mut rng, subj);
            let np_o = self.noun_phrase(&mut rng, obj);
            let make =
                |class: usize| format!("{np_s} {}{} {np_o}.", verb.stem, CLASS_MARKERS[class].1);
            let mut opts = vec![make(subj.class), make(wrong)];
            let gold = usize::from(rng.random_bool(0.5));
            if gold == 1 {
                opts.swap(0, 1);
            }
            agreement.push(Self::example(String::new(), opts, gold, Norm::Raw));
        }

        let choice = |rng: &mut SeedRng, truth: usize, pool: usize| -> (Vec<usize>, usize) {
            let mut others: Vec<usize> = (0..pool).filter(|&p| p != truth).collect();
            others.shuffle(rng);
            let mut opts = vec![truth];
            opts.extend(others.into_iter().take(3));
            opts.shuffle(rng);
            let gold = opts
                .iter()
                .position(|&o| o == truth)
                .expect("truth present");
            (opts, gold)
        };
        let mut residence = Vec::with_capacity(per_task);
        let mut occupation = Vec::with_capacity(per_task);
        for k in 0..per_task {
            let i = k % self.names.len();
            let (opts, gold) = choice(&mut rng, self.home[i], self.places.len());
            residence.push(Self::example(
                format!("{} lives in", self.names[i]),
                opts.iter()
                    .map(|&p| format!(" {}.", self.places[p]))
                    .collect(),
                gold,
                Norm::Pmi,
            ));
            let (opts, gold) = choice(&mut rng, self.job[i], self.jobs.len());
            occupation.push(Self::example(
                format!("{} works as a", self.names[i]),
                opts.iter()
                    .map(|&j| format!(" {}.", self.jobs[j]))
                    .collect(),
                gold,
                Norm::CharLen,
            ));
        }

        let mut objects = Vec::with_capacity(per_task);
        for _ in 0..per_task {
            let subj = self.nouns.choose(&mut rng).expect("nonempty");
            let verb = self.verbs.choose(&mut rng).expect("nonempty");
            let (det, ending, _) = CLASS_MARKERS[subj.class];
            let context = format!("{det} {} {}{ending}", subj.word, verb.stem);
            let good = *self
                .nouns_of(verb.object_class)
                .choose(&mut rng)
                .expect("nonempty");
            let mut opts = vec![good.word.clone()];
            let mut bad: Vec<&Noun> = self
                .nouns
                .iter()
                .filter(|n| n.class != verb.object_class)
                .collect();
            bad.shuffle(&mut rng);
            opts.extend(bad.iter().take(3).map(|n| n.word.clone()));
            // determiner agrees with each candidate so only the preference differs
            let with_det: Vec<(String, bool)> = opts
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let class = self
                        .nouns
                        .iter()
                        .find(|n| &n.word == w)
                        .expect("known noun")
                        .class;
                    (format!(" {} {w}.", CLASS_MARKERS[class].0), k == 0)
                })
                .collect();
            let mut shuffled = with_det;
            shuffled.shuffle(&mut rng);
            let gold = shuffled.iter().position(|(_, g)| *g).expect("gold present");
            objects.push(Self::example(
                context,
                shuffled.into_iter().map(|(s, _)| s).collect(),
                gold,
                Norm::CharLen,
            ));
        }

        Ok(vec![
            TaskSpec::new("agreement", agreement)?,
            TaskSpec::new("residence", residence)?,
            TaskSpec::new("occupation", occupation)?,
            TaskSpec::new("objects", objects)?,
        ])
    }
}
