//! Restaurant-booking dialog generator (full conversations: slot filling,
//! api calls, option proposals, extra information), with switchable user
//! behavior policies, behavior detectors and dataset statistics.
//!
//! The modified policy removes four user behaviors from generated data:
//! volunteering a price range, updating the location preference, rejecting
//! more than one proposed restaurant, and asking for a phone number. Test
//! corpora are always generated with the original (full) behavior set, so a
//! model trained on modified corpora meets novel behavior at deployment.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize, CandidateSet, Dialog, LineKind};

pub const PRICE_RANGES: [&str; 3] = ["cheap", "moderate", "expensive"];
pub const PARTY_SIZES: [u8; 4] = [2, 4, 6, 8];

const CUISINE_POOL: [&str; 10] = [
    "british", "cantonese", "french", "indian", "italian", "japanese", "korean", "spanish",
    "thai", "vietnamese",
];
const LOCATION_POOL: [&str; 10] = [
    "bombay", "beijing", "hanoi", "london", "madrid", "paris", "rome", "seoul", "tokyo",
    "manila",
];

/// Bumped whenever a surface template changes, because candidate indices
/// (and therefore retrieval labels) depend on the template set.
pub const TEMPLATE_VERSION: u32 = 1;

const GREETING_BOT: &str = "hello what can i help you with today";
const ON_IT: &str = "i'm on it";
const ASK_CUISINE: &str = "any preference on a type of cuisine";
const ASK_LOCATION: &str = "where should it be";
const ASK_SIZE: &str = "how many people would be in your party";
const ASK_PRICE: &str = "which price range are you looking for";
const LOOKUP: &str = "ok let me look into some options for you";
const ANYTHING_ELSE: &str = "sure is there anything else to update";
const NEXT_OPTION: &str = "sure let me find an other option for you";
const RESERVE: &str = "great let me do the reservation";
const WELCOME: &str = "you're welcome";
const SILENCE: &str = "<SILENCE>";
const OPTION_PREFIX: &str = "what do you think of this option:";

pub fn party_size_word(size: u8) -> &'static str {
    match size {
        2 => "two",
        4 => "four",
        6 => "six",
        8 => "eight",
        _ => panic!("unsupported party size {size}"),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Restaurant {
    pub name: String,
    pub cuisine: String,
    pub location: String,
    pub price_range: String,
    pub party_size: u8,
    pub rating: u8,
    pub phone: String,
    pub address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeBase {
    pub restaurants: Vec<Restaurant>,
}

/// What the user is after: one value per slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Goal {
    pub cuisine: String,
    pub location: String,
    pub party_size: u8,
    pub price: String,
}

impl KnowledgeBase {
    /// Restaurants matching a goal exactly, highest rating first.
    pub fn matching(&self, goal: &Goal) -> Vec<&Restaurant> {
        let mut out: Vec<&Restaurant> = self
            .restaurants
            .iter()
            .filter(|r| {
                r.cuisine == goal.cuisine
                    && r.location == goal.location
                    && r.party_size == goal.party_size
                    && r.price_range == goal.price
            })
            .collect();
        out.sort_by(|a, b| b.rating.cmp(&a.rating));
        out
    }

    pub fn find(&self, name: &str) -> Option<&Restaurant> {
        self.restaurants.iter().find(|r| r.name == name)
    }

    pub fn cuisines(&self) -> Vec<String> {
        let mut v: Vec<String> = self.restaurants.iter().map(|r| r.cuisine.clone()).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn locations(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .restaurants
            .iter()
            .map(|r| r.location.clone())
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// One `name attribute value` line per fact, restaurants in order.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for r in &self.restaurants {
            out.push_str(&format!("{} R_cuisine {}\n", r.name, r.cuisine));
            out.push_str(&format!("{} R_location {}\n", r.name, r.location));
            out.push_str(&format!("{} R_price {}\n", r.name, r.price_range));
            out.push_str(&format!(
                "{} R_number {}\n",
                r.name,
                party_size_word(r.party_size)
            ));
            out.push_str(&format!("{} R_rating {}\n", r.name, r.rating));
            out.push_str(&format!("{} R_phone {}\n", r.name, r.phone));
            out.push_str(&format!("{} R_address {}\n", r.name, r.address));
        }
        out
    }
}

/// Which behaviors the simulated user may exhibit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub may_volunteer_price: bool,
    pub may_update_location: bool,
    pub max_rejections: usize,
    pub may_ask_phone: bool,
}

impl BehaviorPolicy {
    /// The full behavior set.
    pub const fn original() -> Self {
        BehaviorPolicy {
            may_volunteer_price: true,
            may_update_location: true,
            max_rejections: usize::MAX,
            may_ask_phone: true,
        }
    }

    /// The reduced behavior set: price only when asked, no location updates,
    /// accepts the first or second recommendation, never asks for a phone
    /// number.
    pub const fn modified() -> Self {
        BehaviorPolicy {
            may_volunteer_price: false,
            may_update_location: false,
            max_rejections: 1,
            may_ask_phone: false,
        }
    }
}

/// One flag per removed behavior, as found in a dialog by [`detect_behaviors`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorFlags {
    pub volunteered_price: bool,
    pub updated_location: bool,
    pub rejected_two_or_more: bool,
    pub asked_phone: bool,
}

impl BehaviorFlags {
    pub fn count(&self) -> usize {
        usize::from(self.volunteered_price)
            + usize::from(self.updated_location)
            + usize::from(self.rejected_two_or_more)
            + usize::from(self.asked_phone)
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }

    pub fn as_array(&self) -> [bool; 4] {
        [
            self.volunteered_price,
            self.updated_location,
            self.rejected_two_or_more,
            self.asked_phone,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_cuisines: usize,
    pub n_locations: usize,
    /// Restaurants per (cuisine, location, price, party size) combination.
    pub ratings_per_combo: usize,
    /// Probability the user changes one slot after the first api call.
    pub p_update: f64,
    /// Probability the user asks for the phone number (when permitted).
    pub p_ask_phone: f64,
    /// Probability the user asks for the address.
    pub p_ask_address: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_cuisines: 2,
            n_locations: 2,
            ratings_per_combo: 4,
            p_update: 0.5,
            p_ask_phone: 0.5,
            p_ask_address: 0.5,
        }
    }
}

pub const DEFAULT_RATINGS_PER_COMBO: usize = 4;

/// Deterministic knowledge base over the first `n_cuisines` × `n_locations`
/// of the name pools, all price ranges and party sizes, with
/// [`DEFAULT_RATINGS_PER_COMBO`] restaurants per combination.
pub fn generate_kb(seed: u64, n_cuisines: usize, n_locations: usize) -> KnowledgeBase {
    generate_kb_with(seed, n_cuisines, n_locations, DEFAULT_RATINGS_PER_COMBO)
}

pub fn generate_kb_with(
    seed: u64,
    n_cuisines: usize,
    n_locations: usize,
    ratings_per_combo: usize,
) -> KnowledgeBase {
    assert!(n_cuisines >= 1 && n_cuisines <= CUISINE_POOL.len());
    assert!(n_locations >= 1 && n_locations <= LOCATION_POOL.len());
    assert!(ratings_per_combo >= 1 && ratings_per_combo <= 8);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut restaurants = Vec::new();
    for cuisine in &CUISINE_POOL[..n_cuisines] {
        for location in &LOCATION_POOL[..n_locations] {
            for price in PRICE_RANGES {
                for size in PARTY_SIZES {
                    // Distinct ratings per combination so proposal order is
                    // total and names stay unique.
                    let mut ratings: Vec<u8> = (1..=8).collect();
                    ratings.shuffle(&mut rng);
                    let mut picked = ratings[..ratings_per_combo].to_vec();
                    picked.sort_unstable_by(|a, b| b.cmp(a));
                    for rating in picked {
                        let name = format!(
                            "resto_{location}_{price}_{cuisine}_{size}p_{rating}stars"
                        );
                        restaurants.push(Restaurant {
                            name: name.clone(),
                            cuisine: (*cuisine).to_owned(),
                            location: (*location).to_owned(),
                            price_range: price.to_owned(),
                            party_size: size,
                            rating,
                            phone: format!("{name}_phone"),
                            address: format!("{name}_address"),
                        });
                    }
                }
            }
        }
    }
    KnowledgeBase { restaurants }
}

fn api_call_text(goal: &Goal) -> String {
    format!(
        "api_call {} {} {} {}",
        goal.cuisine,
        goal.location,
        party_size_word(goal.party_size),
        goal.price
    )
}

fn option_text(name: &str) -> String {
    format!("{OPTION_PREFIX} {name}")
}

fn here_it_is(value: &str) -> String {
    format!("here it is {value}")
}

/// Every response the system can produce for this knowledge base, in a fixed
/// order: the static templates, one api call per slot combination, then per
/// restaurant the proposal, phone and address lines.
pub fn candidate_set(kb: &KnowledgeBase) -> CandidateSet {
    let mut texts: Vec<String> = vec![
        GREETING_BOT.into(),
        ON_IT.into(),
        ASK_CUISINE.into(),
        ASK_LOCATION.into(),
        ASK_SIZE.into(),
        ASK_PRICE.into(),
        LOOKUP.into(),
        ANYTHING_ELSE.into(),
        NEXT_OPTION.into(),
        RESERVE.into(),
        WELCOME.into(),
    ];
    for cuisine in kb.cuisines() {
        for location in kb.locations() {
            for size in PARTY_SIZES {
                for price in PRICE_RANGES {
                    texts.push(api_call_text(&Goal {
                        cuisine: cuisine.clone(),
                        location: location.clone(),
                        party_size: size,
                        price: price.to_owned(),
                    }));
                }
            }
        }
    }
    for r in &kb.restaurants {
        texts.push(option_text(&r.name));
        texts.push(here_it_is(&r.phone));
        texts.push(here_it_is(&r.address));
    }
    CandidateSet::from_texts(texts).expect("generated candidate texts are unique")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Cuisine,
    Location,
    Size,
    Price,
}

const SLOT_ORDER: [Slot; 4] = [Slot::Cuisine, Slot::Location, Slot::Size, Slot::Price];

impl Slot {
    fn question(self) -> &'static str {
        match self {
            Slot::Cuisine => ASK_CUISINE,
            Slot::Location => ASK_LOCATION,
            Slot::Size => ASK_SIZE,
            Slot::Price => ASK_PRICE,
        }
    }

    fn request_phrase(self, goal: &Goal) -> String {
        match self {
            Slot::Cuisine => format!("with {} cuisine", goal.cuisine),
            Slot::Location => format!("in {}", goal.location),
            Slot::Size => format!("for {} people", party_size_word(goal.party_size)),
            Slot::Price => format!("in a {} price range", goal.price),
        }
    }

    fn answer_phrase(self, goal: &Goal) -> String {
        match self {
            Slot::Cuisine => format!("with {} food", goal.cuisine),
            Slot::Location => format!("in {}", goal.location),
            Slot::Size => format!("for {} people please", party_size_word(goal.party_size)),
            Slot::Price => format!("in a {} price range please", goal.price),
        }
    }

    fn update_phrase(self, goal: &Goal) -> String {
        self.request_phrase(goal)
    }
}

fn exchange(user: &str, bot: &str) -> LineKind {
    LineKind::Exchange {
        user: tokenize(user),
        bot: tokenize(bot),
    }
}

/// Generates one full booking dialog under the given behavior policy.
pub fn generate_dialog(
    kb: &KnowledgeBase,
    policy: &BehaviorPolicy,
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Dialog {
    let cuisines = kb.cuisines();
    let locations = kb.locations();
    let mut goal = loop {
        let goal = Goal {
            cuisine: cuisines.choose(rng).unwrap().clone(),
            location: locations.choose(rng).unwrap().clone(),
            party_size: *PARTY_SIZES.choose(rng).unwrap(),
            price: (*PRICE_RANGES.choose(rng).unwrap()).to_owned(),
        };
        if !kb.matching(&goal).is_empty() {
            break goal;
        }
    };

    let mut kinds: Vec<LineKind> = Vec::new();
    kinds.push(exchange("hi", GREETING_BOT));

    // Opening request: volunteer 0..=n of the allowed slots, phrases in the
    // fixed slot order.
    let allowed: Vec<Slot> = SLOT_ORDER
        .into_iter()
        .filter(|s| policy.may_volunteer_price || *s != Slot::Price)
        .collect();
    let n_volunteered = rng.random_range(0..=allowed.len());
    let mut picked_idx = rand::seq::index::sample(rng, allowed.len(), n_volunteered).into_vec();
    picked_idx.sort_unstable();
    let volunteered: Vec<Slot> = picked_idx.into_iter().map(|i| allowed[i]).collect();

    let mut request = String::from("may i have a table");
    for slot in &volunteered {
        request.push(' ');
        request.push_str(&slot.request_phrase(&goal));
    }
    kinds.push(exchange(&request, ON_IT));

    let missing: Vec<Slot> = SLOT_ORDER
        .into_iter()
        .filter(|s| !volunteered.contains(s))
        .collect();
    if missing.is_empty() {
        kinds.push(exchange(SILENCE, LOOKUP));
    } else {
        kinds.push(exchange(SILENCE, missing[0].question()));
        for i in 1..missing.len() {
            kinds.push(exchange(&missing[i - 1].answer_phrase(&goal), missing[i].question()));
        }
        kinds.push(exchange(&missing[missing.len() - 1].answer_phrase(&goal), LOOKUP));
    }
    kinds.push(exchange(SILENCE, &api_call_text(&goal)));

    // Optional single preference update after the first api call.
    if rng.random_bool(config.p_update) {
        let updatable: Vec<Slot> = SLOT_ORDER
            .into_iter()
            .filter(|s| policy.may_update_location || *s != Slot::Location)
            .filter(|s| match s {
                Slot::Cuisine => cuisines.len() > 1,
                Slot::Location => locations.len() > 1,
                Slot::Size => true,
                Slot::Price => true,
            })
            .collect();
        if let Some(&slot) = updatable.choose(rng) {
            match slot {
                Slot::Cuisine => {
                    let others: Vec<&String> =
                        cuisines.iter().filter(|c| **c != goal.cuisine).collect();
                    goal.cuisine = (*others.choose(rng).unwrap()).clone();
                }
                Slot::Location => {
                    let others: Vec<&String> =
                        locations.iter().filter(|l| **l != goal.location).collect();
                    goal.location = (*others.choose(rng).unwrap()).clone();
                }
                Slot::Size => {
                    let others: Vec<u8> = PARTY_SIZES
                        .into_iter()
                        .filter(|s| *s != goal.party_size)
                        .collect();
                    goal.party_size = *others.choose(rng).unwrap();
                }
                Slot::Price => {
                    let others: Vec<&str> = PRICE_RANGES
                        .into_iter()
                        .filter(|p| *p != goal.price)
                        .collect();
                    goal.price = (*others.choose(rng).unwrap()).to_owned();
                }
            }
            let update = format!("instead could it be {}", slot.update_phrase(&goal));
            kinds.push(exchange(&update, ANYTHING_ELSE));
            kinds.push(exchange("no", LOOKUP));
            kinds.push(exchange(SILENCE, &api_call_text(&goal)));
        }
    }

    // Knowledge-base results for the final goal.
    let matches: Vec<Restaurant> = kb.matching(&goal).into_iter().cloned().collect();
    assert!(!matches.is_empty(), "goal sampling guarantees a match");
    for r in &matches {
        kinds.push(LineKind::KbFact {
            entity: r.name.clone(),
            attribute: "R_phone".into(),
            value: r.phone.clone(),
        });
        kinds.push(LineKind::KbFact {
            entity: r.name.clone(),
            attribute: "R_address".into(),
            value: r.address.clone(),
        });
        kinds.push(LineKind::KbFact {
            entity: r.name.clone(),
            attribute: "R_rating".into(),
            value: r.rating.to_string(),
        });
    }

    // Proposals in decreasing rating order; the user rejects a bounded number
    // of times, then accepts.
    let max_rejections = policy.max_rejections.min(3).min(matches.len() - 1);
    let rejections = rng.random_range(0..=max_rejections);
    kinds.push(exchange(SILENCE, &option_text(&matches[0].name)));
    for i in 1..=rejections {
        kinds.push(exchange("no this does not work for me", NEXT_OPTION));
        kinds.push(exchange(SILENCE, &option_text(&matches[i].name)));
    }
    let chosen = &matches[rejections];
    kinds.push(exchange("let's do it", RESERVE));

    if policy.may_ask_phone && rng.random_bool(config.p_ask_phone) {
        kinds.push(exchange(
            "do you have its phone number",
            &here_it_is(&chosen.phone),
        ));
    }
    if rng.random_bool(config.p_ask_address) {
        kinds.push(exchange(
            "do you have its address",
            &here_it_is(&chosen.address),
        ));
    }
    kinds.push(exchange("thank you", WELCOME));

    Dialog::from_kinds(kinds)
}

/// A generated corpus: one shared knowledge base and candidate set, train and
/// dev under the requested policy, test always under the original policy.
#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub kb: KnowledgeBase,
    pub candidates: CandidateSet,
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

/// Generates a dataset deterministically from the seed. The knowledge base,
/// candidate set and test corpus depend only on (seed, config), so datasets
/// generated with different train/dev policies share a byte-identical test
/// set.
pub fn generate_dataset(
    policy: &BehaviorPolicy,
    n_train: usize,
    n_dev: usize,
    n_test: usize,
    seed: u64,
    config: &GeneratorConfig,
) -> GeneratedDataset {
    let kb = generate_kb_with(
        seed,
        config.n_cuisines,
        config.n_locations,
        config.ratings_per_combo,
    );
    let candidates = candidate_set(&kb);

    let stream_rng = |stream: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng
    };
    let gen_split = |policy: &BehaviorPolicy, n: usize, stream: u64| {
        let mut rng = stream_rng(stream);
        (0..n)
            .map(|_| generate_dialog(&kb, policy, config, &mut rng))
            .collect::<Vec<_>>()
    };

    let train = gen_split(policy, n_train, 1);
    let dev = gen_split(policy, n_dev, 2);
    let test = gen_split(&BehaviorPolicy::original(), n_test, 3);

    GeneratedDataset {
        kb,
        candidates,
        train,
        dev,
        test,
    }
}

fn is_greeting_or_silence(tokens: &[String]) -> bool {
    !tokens.is_empty()
        && tokens
            .iter()
            .all(|t| matches!(t.as_str(), "hi" | "hello" | "good" | "morning" | SILENCE))
}

/// Finds the four removed behaviors in a dialog.
///
/// The rules are anchored on structural markers rather than exact surface
/// templates: the opening request is the first non-greeting user utterance;
/// a location update shows up as a location change between consecutive
/// `api_call` lines; rejections are counted from the number of proposal
/// lines; a phone request is any user utterance containing the token
/// `phone`.
pub fn detect_behaviors(dialog: &Dialog) -> BehaviorFlags {
    let mut flags = BehaviorFlags::default();

    if let Some(request) = dialog
        .user_utterances()
        .find(|u| !is_greeting_or_silence(u))
    {
        flags.volunteered_price = request
            .iter()
            .any(|t| PRICE_RANGES.contains(&t.as_str()));
    }

    let api_calls: Vec<&[String]> = dialog
        .bot_utterances()
        .filter(|b| b.first().is_some_and(|t| t == "api_call"))
        .collect();
    flags.updated_location = api_calls
        .windows(2)
        .any(|w| w[0].len() >= 3 && w[1].len() >= 3 && w[0][2] != w[1][2]);

    let option_prefix = tokenize(OPTION_PREFIX);
    let proposals = dialog
        .bot_utterances()
        .filter(|b| b.len() > option_prefix.len() && b[..option_prefix.len()] == option_prefix[..])
        .count();
    flags.rejected_two_or_more = proposals >= 3;

    flags.asked_phone = dialog
        .user_utterances()
        .any(|u| u.iter().any(|t| t == "phone"));

    flags
}

/// Dialog-level behavior totals and the behaviors-per-dialog histogram.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_dialogs: usize,
    /// Dialogs containing each behavior: volunteered price, updated
    /// location, two-or-more rejections, phone request.
    pub behavior_counts: [usize; 4],
    /// Dialogs with exactly 0, 1, 2, 3, 4 behaviors. Sums to `n_dialogs`.
    pub behaviors_per_dialog: [usize; 5],
}

pub fn dataset_stats(dialogs: &[Dialog]) -> DatasetStats {
    let mut stats = DatasetStats {
        n_dialogs: dialogs.len(),
        ..DatasetStats::default()
    };
    for dialog in dialogs {
        let flags = detect_behaviors(dialog);
        for (slot, hit) in stats.behavior_counts.iter_mut().zip(flags.as_array()) {
            *slot += usize::from(hit);
        }
        stats.behaviors_per_dialog[flags.count()] += 1;
    }
    stats
}
