use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instance::{read_jsonl, write_jsonl, Argument, DataError, Event, EventInstance, Span};
use super::ontology::{EventSchema, Ontology};

/// Knobs of the synthetic corpus. Documents are grouped into stories: every
/// document of a story reports the same event (same type, same participants),
/// and a story's documents are spread over all splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Number of event types when no ontology is supplied.
    pub num_types: usize,
    pub min_story: usize,
    pub max_story: usize,
    /// Share of documents that mention both participants without saying who
    /// did what.
    pub vague_fraction: f64,
    pub secondary_prob: f64,
    pub optional_role_prob: f64,
    pub name_pool: usize,
    /// Keep a story's non-person arguments and background sentences fixed
    /// across its documents. Off, only the two people identify a story.
    pub story_details: bool,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train: 2000,
            n_dev: 300,
            n_test: 300,
            num_types: 6,
            min_story: 20,
            max_story: 60,
            vague_fraction: 0.5,
            secondary_prob: 0.35,
            optional_role_prob: 0.8,
            name_pool: 40,
            story_details: true,
            min_tokens: 30,
            max_tokens: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub ontology: Ontology,
    pub train: Vec<EventInstance>,
    pub dev: Vec<EventInstance>,
    pub test: Vec<EventInstance>,
}

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

impl Corpus {
    /// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` and `ontology.json`.
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir)?;
        self.ontology.save(&dir.join("ontology.json"))?;
        for (name, split) in SPLITS.iter().zip([&self.train, &self.dev, &self.test]) {
            write_jsonl(&dir.join(format!("{name}.jsonl")), split)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus, DataError> {
        let ontology = Ontology::load(&dir.join("ontology.json"))?;
        let mut splits = SPLITS.iter().map(|s| read_jsonl::<EventInstance>(&dir.join(format!("{s}.jsonl"))));
        let corpus = Corpus {
            ontology,
            train: splits.next().unwrap()?,
            dev: splits.next().unwrap()?,
            test: splits.next().unwrap()?,
        };
        for inst in corpus.train.iter().chain(&corpus.dev).chain(&corpus.test) {
            inst.validate(&corpus.ontology)?;
        }
        Ok(corpus)
    }
}

/// Phrasing material for one event type. The first two roles are people;
/// every further role is introduced by its preposition.
#[derive(Debug, Clone)]
struct Lexicon {
    name: String,
    schema: EventSchema,
    triggers: Vec<String>,
    people: bool,
    fillers: Vec<Vec<String>>,
    preps: Vec<String>,
    /// Sentences about the type's usual surroundings, used as filler.
    background: Vec<Vec<String>>,
}

const PLACES: [&str; 14] = [
    "harbor", "market", "airport", "station", "plaza", "library", "stadium", "embassy", "hospital", "factory",
    "bridge", "campus", "village", "courthouse",
];

struct Base {
    name: &'static str,
    roles: [&'static str; 4],
    template: &'static str,
    triggers: [&'static str; 3],
    objects: [&'static str; 6],
    prep: &'static str,
    background: [&'static str; 8],
}

const BASES: [Base; 6] = [
    Base {
        name: "attack",
        roles: ["attacker", "target", "instrument", "place"],
        template: "{attacker} attacked {target} using {instrument} at {place}",
        triggers: ["stabbed", "shot", "assaulted"],
        objects: ["knife", "rifle", "kitchen knife", "grenade", "baseball bat", "pistol"],
        prep: "with",
        background: [
            "ambulances arrived within minutes of the first call .",
            "paramedics treated two people for minor injuries .",
            "police sealed off the surrounding streets overnight .",
            "investigators collected evidence from the scene .",
            "the wounded were taken to a nearby clinic .",
            "officers questioned shaken bystanders for hours .",
            "a forensic team photographed blood stains on the pavement .",
            "neighbors said violence had been rising for months .",
        ],
    },
    Base {
        name: "transfer",
        roles: ["giver", "recipient", "money", "place"],
        template: "{giver} gave {money} to {recipient} at {place}",
        triggers: ["paid", "funded", "reimbursed"],
        objects: ["500 dollars", "9000 euros", "200 pounds", "70 dollars", "3000 yen", "40000 euros"],
        prep: "amounting",
        background: [
            "bank records showed the payment cleared quickly .",
            "auditors reviewed the account statements carefully .",
            "the funds were wired through an intermediary account .",
            "accountants flagged the invoice for review .",
            "the treasury confirmed the receipt of the deposit .",
            "tax filings later listed the sum as a donation .",
            "the ledger entry was signed by two clerks .",
            "a receipt was stamped and filed the same day .",
        ],
    },
    Base {
        name: "employment",
        roles: ["employer", "employee", "position", "place"],
        template: "{employer} hired {employee} as {position} at {place}",
        triggers: ["recruited", "appointed", "employed"],
        objects: ["driver", "chief engineer", "accountant", "night guard", "cook", "spokesperson"],
        prep: "as",
        background: [
            "the company posted the vacancy last spring .",
            "human resources processed the contract paperwork .",
            "the new recruit starts work next month .",
            "the firm has been expanding its workforce steadily .",
            "colleagues welcomed the hire at a short ceremony .",
            "the job offer included a modest salary and pension .",
            "interviews for the role lasted several weeks .",
            "the payroll department updated its records .",
        ],
    },
    Base {
        name: "arrest",
        roles: ["officer", "suspect", "crime", "place"],
        template: "{officer} arrested {suspect} for {crime} at {place}",
        triggers: ["detained", "apprehended", "handcuffed"],
        objects: ["fraud", "arson", "tax evasion", "smuggling", "burglary", "bribery"],
        prep: "for",
        background: [
            "prosecutors are expected to file charges soon .",
            "the detainee was held overnight in a cell .",
            "a judge will review the case at a bail hearing .",
            "lawyers for the accused declined to comment .",
            "the warrant had been issued earlier that week .",
            "detectives had been tracking the case for months .",
            "the accused was fingerprinted and photographed .",
            "a court date has been set for next month .",
        ],
    },
    Base {
        name: "sale",
        roles: ["seller", "buyer", "artifact", "place"],
        template: "{seller} sold {artifact} to {buyer} at {place}",
        triggers: ["supplied", "traded", "delivered"],
        objects: ["a truck", "old paintings", "copper wire", "a sailboat", "rare stamps", "grain"],
        prep: "of",
        background: [
            "the buyer paid in cash according to the receipt .",
            "dealers said prices had risen sharply this year .",
            "the merchandise was loaded onto a cargo van .",
            "customs officials inspected the shipment briefly .",
            "the auction house handled the paperwork .",
            "brokers described the deal as unusually quick .",
            "the goods were packed in wooden crates .",
            "a bill of sale was signed before noon .",
        ],
    },
    Base {
        name: "meeting",
        roles: ["host", "visitor", "topic", "place"],
        template: "{host} met {visitor} about {topic} at {place}",
        triggers: ["hosted", "received", "welcomed"],
        objects: ["water rights", "the budget", "trade tariffs", "border security", "fishing quotas", "the election"],
        prep: "regarding",
        background: [
            "the talks lasted nearly three hours .",
            "aides described the discussion as frank and useful .",
            "a joint statement is expected later this week .",
            "delegations exchanged gifts at the start of the session .",
            "the agenda had been agreed in advance .",
            "photographers waited outside the conference hall .",
            "both sides promised to continue the dialogue .",
            "the delegation flew home after the summit .",
        ],
    },
];

const DISTRACTORS: [&str; 14] = [
    "the weather stayed mild for most of the week .",
    "local radio covered the story in its evening bulletin .",
    "{n} , a neighbor , declined to comment .",
    "traffic was slow near the center during the afternoon .",
    "an official from the council promised an update soon .",
    "{n} told reporters that rumors were spreading quickly .",
    "several residents gathered outside to watch .",
    "the newspaper published a short note on page four .",
    "analysts said the matter could take months to settle .",
    "{n} wrote about the case on a popular blog .",
    "no further details were released on monday .",
    "the mayor was travelling abroad at the time .",
    "witnesses described a calm and ordinary morning .",
    "{n} , who lives nearby , heard nothing unusual .",
];

const BACKGROUND_SHARE: f64 = 0.75;

const STORY_BACKGROUND: usize = 3;

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ren", "sa", "tu", "vo", "zel", "bri", "dan", "fe", "gor", "ha", "ju", "nix", "pa", "qui",
    "ros", "ti", "ul", "wen", "ya", "bek", "dro",
];

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn base_lexicon(b: &Base) -> Lexicon {
    let roles: Vec<String> = b.roles.iter().map(|r| r.to_string()).collect();
    Lexicon {
        name: b.name.to_string(),
        schema: EventSchema {
            roles,
            template: b.template.to_string(),
        },
        triggers: b.triggers.iter().map(|t| t.to_string()).collect(),
        people: true,
        fillers: vec![
            b.objects.iter().map(|o| o.to_string()).collect(),
            PLACES.iter().map(|p| p.to_string()).collect(),
        ],
        preps: vec![b.prep.to_string(), "in".to_string()],
        background: b.background.iter().map(|l| words(l)).collect(),
    }
}

/// A type beyond the six built-in ones: built-in roles and phrasing, fresh
/// trigger and filler words.
fn variant_lexicon(b: &Base, index: usize, rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Lexicon {
    let mut lex = base_lexicon(b);
    lex.name = format!("{}{}", b.name, index);
    lex.triggers = (0..3).map(|_| fresh(rng, 3, used)).collect();
    lex.fillers[0] = (0..6).map(|_| fresh(rng, 2, used)).collect();
    lex.background = pseudo_background(rng, used);
    lex
}

/// Phrasing for a user-supplied type with no built-in lexicon.
fn generic_lexicon(name: &str, schema: &EventSchema, rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Lexicon {
    let people = schema.roles.len() >= 2;
    let rest = if people { &schema.roles[2..] } else { &schema.roles[..] };
    Lexicon {
        name: name.to_string(),
        schema: schema.clone(),
        triggers: (0..3).map(|_| fresh(rng, 3, used)).collect(),
        people,
        fillers: rest.iter().map(|_| (0..6).map(|_| fresh(rng, 2, used)).collect()).collect(),
        preps: rest.iter().map(|r| format!("{r}-of")).collect(),
        background: pseudo_background(rng, used),
    }
}

fn pseudo_background(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Vec<Vec<String>> {
    let topic: Vec<String> = (0..10).map(|_| fresh(rng, 3, used)).collect();
    (0..8)
        .map(|_| {
            let mut pick = topic.choose_multiple(rng, 3);
            let (a, b, c) = (pick.next().unwrap(), pick.next().unwrap(), pick.next().unwrap());
            words(&format!("the {a} near the {b} was {c} again ."))
        })
        .collect()
}

fn fresh(rng: &mut ChaCha8Rng, syllables: usize, used: &mut BTreeSet<String>) -> String {
    loop {
        let w = pseudo_word(rng, syllables);
        if used.insert(w.clone()) {
            return w;
        }
    }
}

struct Story {
    lex: usize,
    people: [String; 2],
    fillers: Vec<Vec<String>>,
    /// Indices into the lexicon's background sentences this story uses.
    background: Vec<usize>,
}

struct Sentence {
    tokens: Vec<String>,
    trigger: usize,
    /// (role, offset, length) relative to the sentence.
    args: Vec<(String, usize, usize)>,
}

fn event_sentence(lex: &Lexicon, story: &Story, vague: bool, keep: &[bool], rng: &mut ChaCha8Rng) -> Sentence {
    let trig = lex.triggers.choose(rng).unwrap().clone();
    let mut s = Sentence {
        tokens: Vec::new(),
        trigger: 0,
        args: Vec::new(),
    };
    let push_arg = |s: &mut Sentence, role: &str, value: &[String]| {
        s.args.push((role.to_string(), s.tokens.len(), value.len()));
        s.tokens.extend_from_slice(value);
    };
    let push_trigger = |s: &mut Sentence| {
        s.trigger = s.tokens.len();
        s.tokens.push(trig.clone());
    };
    let filler_roles = if lex.people { &lex.schema.roles[2..] } else { &lex.schema.roles[..] };
    if lex.people {
        let (r0, r1) = (&lex.schema.roles[0], &lex.schema.roles[1]);
        let (p0, p1) = (vec![story.people[0].clone()], vec![story.people[1].clone()]);
        if vague {
            let mut pair = [(r0, p0), (r1, p1)];
            pair.shuffle(rng);
            s.tokens.extend(words("a report linked"));
            push_arg(&mut s, pair[0].0, &pair[0].1);
            s.tokens.push("and".into());
            push_arg(&mut s, pair[1].0, &pair[1].1);
            s.tokens.extend(words("to the case in which someone"));
            push_trigger(&mut s);
            s.tokens.push("someone".into());
        } else if rng.gen_bool(0.5) {
            push_arg(&mut s, r0, &p0);
            push_trigger(&mut s);
            push_arg(&mut s, r1, &p1);
        } else {
            push_arg(&mut s, r1, &p1);
            s.tokens.push("was".into());
            push_trigger(&mut s);
            s.tokens.push("by".into());
            push_arg(&mut s, r0, &p0);
        }
    } else {
        s.tokens.extend(words("officials said it"));
        push_trigger(&mut s);
    }
    for (i, role) in filler_roles.iter().enumerate() {
        if keep[i] {
            s.tokens.push(lex.preps[i].clone());
            push_arg(&mut s, role, &story.fillers[i]);
        }
    }
    s.tokens.push(".".into());
    s
}

fn distractor(rng: &mut ChaCha8Rng, names: &[String], avoid: &[&String]) -> Vec<String> {
    let pattern = DISTRACTORS.choose(rng).unwrap();
    let name = loop {
        let n = names.choose(rng).unwrap();
        if !avoid.contains(&n) {
            break n.clone();
        }
    };
    pattern
        .split_whitespace()
        .map(|w| if w == "{n}" { name.clone() } else { w.to_string() })
        .collect()
}

fn build_lexicons(cfg: &GeneratorConfig, ontology: Option<&Ontology>, rng: &mut ChaCha8Rng) -> Vec<Lexicon> {
    let mut used: BTreeSet<String> = BTreeSet::new();
    match ontology {
        Some(ont) => ont
            .types
            .iter()
            .map(|(name, schema)| match BASES.iter().find(|b| b.name == name) {
                Some(b) if base_lexicon(b).schema.roles == schema.roles => {
                    let mut lex = base_lexicon(b);
                    lex.schema = schema.clone();
                    lex
                }
                _ => generic_lexicon(name, schema, rng, &mut used),
            })
            .collect(),
        None => (0..cfg.num_types.max(1))
            .map(|i| {
                let b = &BASES[i % BASES.len()];
                if i < BASES.len() {
                    base_lexicon(b)
                } else {
                    variant_lexicon(b, i / BASES.len() + 1, rng, &mut used)
                }
            })
            .collect(),
    }
}

/// Generates train/dev/test splits deterministically from `cfg.seed`. With
/// `ontology`, types are taken from it (built-in names reuse built-in
/// phrasing); otherwise the first `cfg.num_types` built-in types are used.
pub fn generate_corpus(cfg: &GeneratorConfig, ontology: Option<&Ontology>) -> Result<Corpus, DataError> {
    if cfg.n_train == 0 || cfg.n_dev == 0 || cfg.n_test == 0 {
        return Err(DataError::Ontology("split sizes must be at least 1".into()));
    }
    if let Some(ont) = ontology {
        ont.validate()?;
        if ont.types.is_empty() {
            return Err(DataError::Ontology("ontology has no event types".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicons = build_lexicons(cfg, ontology, &mut rng);
    let mut reserved: BTreeSet<String> = BTreeSet::new();
    for lex in &lexicons {
        reserved.extend(lex.triggers.iter().cloned());
        for f in lex.fillers.iter().flatten() {
            reserved.extend(words(f));
        }
    }
    let mut names = Vec::new();
    let mut used = reserved.clone();
    while names.len() < cfg.name_pool.max(6) {
        names.push(fresh(&mut rng, 2, &mut used));
    }

    let total = cfg.n_train + cfg.n_dev + cfg.n_test;
    let mut stories: Vec<(Story, usize)> = Vec::new();
    let mut planned = 0;
    while planned < total {
        let lex = stories.len() % lexicons.len();
        let size = rng.gen_range(cfg.min_story.max(1)..=cfg.max_story.max(cfg.min_story.max(1)));
        let size = size.min(total - planned);
        let mut people = names.choose_multiple(&mut rng, 2).cloned();
        let people = [people.next().unwrap(), people.next().unwrap()];
        let fillers = lexicons[lex]
            .fillers
            .iter()
            .map(|f| words(f.choose(&mut rng).unwrap()))
            .collect();
        let n_bg = lexicons[lex].background.len();
        let background = rand::seq::index::sample(&mut rng, n_bg, STORY_BACKGROUND.min(n_bg)).into_vec();
        stories.push((
            Story {
                lex,
                people,
                fillers,
                background,
            },
            size,
        ));
        planned += size;
    }

    let mut docs = Vec::with_capacity(total);
    for (si, (story, size)) in stories.iter().enumerate() {
        for _ in 0..*size {
            docs.push(make_doc(cfg, &lexicons, &stories, si, story, &names, &mut rng));
        }
    }
    docs.shuffle(&mut rng);
    for (i, d) in docs.iter_mut().enumerate() {
        d.doc_id = format!("doc{i:05}");
    }
    let test = docs.split_off(cfg.n_train + cfg.n_dev);
    let dev = docs.split_off(cfg.n_train);
    let ontology = Ontology {
        types: lexicons.iter().map(|l| (l.name.clone(), l.schema.clone())).collect(),
    };
    Ok(Corpus {
        ontology,
        train: docs,
        dev,
        test,
    })
}

fn make_doc(
    cfg: &GeneratorConfig,
    lexicons: &[Lexicon],
    stories: &[(Story, usize)],
    si: usize,
    story: &Story,
    names: &[String],
    rng: &mut ChaCha8Rng,
) -> EventInstance {
    let lex = &lexicons[story.lex];
    let loose;
    let story = if cfg.story_details {
        story
    } else {
        loose = Story {
            lex: story.lex,
            people: story.people.clone(),
            fillers: lex.fillers.iter().map(|f| words(f.choose(rng).unwrap())).collect(),
            background: (0..lex.background.len()).collect(),
        };
        &loose
    };
    let keep: Vec<bool> = lex.fillers.iter().map(|_| rng.gen_bool(cfg.optional_role_prob)).collect();
    let vague = lex.people && rng.gen_bool(cfg.vague_fraction);
    let primary = event_sentence(lex, story, vague, &keep, rng);

    let mut secondary = None;
    if lexicons.len() > 1 && rng.gen_bool(cfg.secondary_prob) {
        let oi = rng.gen_range(0..stories.len());
        let other = &stories[oi].0;
        let clash = other.lex == story.lex
            || oi == si
            || other.people.iter().any(|p| story.people.contains(p))
            || other.fillers.iter().flatten().any(|w| story.fillers.iter().flatten().any(|v| v == w));
        if !clash {
            let olex = &lexicons[other.lex];
            let okeep: Vec<bool> = olex.fillers.iter().map(|_| rng.gen_bool(cfg.optional_role_prob)).collect();
            secondary = Some((other.lex, event_sentence(olex, other, false, &okeep, rng)));
        }
    }

    let sec_words: Vec<String> = secondary.as_ref().map(|(_, s)| s.tokens.clone()).unwrap_or_default();
    let avoid: Vec<&String> = story.people.iter().chain(&sec_words).collect();

    let event_len = primary.tokens.len() + secondary.as_ref().map_or(0, |(_, s)| s.tokens.len());
    let target_len = rng.gen_range(cfg.min_tokens..=cfg.max_tokens.max(cfg.min_tokens));
    let mut fillers: Vec<Vec<String>> = Vec::new();
    let mut len = event_len;
    loop {
        let d = if rng.gen_bool(BACKGROUND_SHARE) {
            lex.background[*story.background.choose(rng).unwrap()].clone()
        } else {
            distractor(rng, names, &avoid)
        };
        if len + d.len() > cfg.max_tokens && len >= cfg.min_tokens.min(cfg.max_tokens) {
            break;
        }
        len += d.len();
        fillers.push(d);
        if len >= target_len {
            break;
        }
    }

    let mut blocks: Vec<(Option<usize>, Vec<String>)> = fillers.into_iter().map(|f| (None, f)).collect();
    let pos = rng.gen_range(0..=blocks.len());
    blocks.insert(pos, (Some(0), Vec::new()));
    if secondary.is_some() {
        let pos = rng.gen_range(0..=blocks.len());
        blocks.insert(pos, (Some(1), Vec::new()));
    }

    let mut tokens = Vec::with_capacity(len);
    let mut events: Vec<Option<Event>> = vec![None, None];
    for (which, words) in blocks {
        match which {
            None => tokens.extend(words),
            Some(w) => {
                let (type_name, s) = match w {
                    0 => (&lex.name, &primary),
                    _ => {
                        let (l, s) = secondary.as_ref().unwrap();
                        (&lexicons[*l].name, s)
                    }
                };
                let base = tokens.len();
                tokens.extend(s.tokens.iter().cloned());
                events[w] = Some(Event {
                    event_type: type_name.clone(),
                    trigger: Span::new(base + s.trigger, base + s.trigger + 1),
                    arguments: s
                        .args
                        .iter()
                        .map(|(role, o, l)| Argument {
                            role: role.clone(),
                            start: base + o,
                            end: base + o + l,
                        })
                        .collect(),
                });
            }
        }
    }
    EventInstance {
        doc_id: String::new(),
        tokens,
        events: events.into_iter().flatten().collect(),
    }
}
