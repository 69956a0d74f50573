use super::stats::SceneStats;
use super::vocab::EOS_TOKEN;
use super::{Grade, Scene};

/// Number of paraphrase templates; `variant_seed % NUM_STYLES` picks one.
pub const NUM_STYLES: usize = 5;

/// Normal scenes with fewer cells than this are reported as insufficient.
pub const INSUFFICIENT_BELOW: usize = 40;

/// Tercile cut points of the generator's scene statistics (equal grade mix,
/// default params). `tests/scene.rs` recomputes them by Monte Carlo.
pub const PLEOMORPHISM_CUTS: [f64; 2] = [0.232, 0.344];
pub const NN_DISTANCE_CUTS: [f64; 2] = [9.10, 16.81];
pub const POLARITY_CUTS: [f64; 2] = [0.717, 0.791];
pub const NUCLEOLI_CUTS: [f64; 2] = [0.267, 0.371];

const PLEO_WORDS: [&str; 3] = ["mild", "moderate", "severe"];
const CROWD_WORDS: [&str; 3] = ["mild", "moderate", "severe"];
const POLARITY_WORDS: [&str; 3] = ["preserved", "reduced", "lost"];
const MITOSIS_WORDS: [&str; 3] = ["absent", "rare", "frequent"];
const NUCLEOLI_WORDS: [&str; 3] = ["inconspicuous", "visible", "prominent"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegreeWords {
    pub pleomorphism: &'static str,
    pub crowding: &'static str,
    pub polarity: &'static str,
    pub mitosis: &'static str,
    pub nucleoli: &'static str,
    pub conclusion: &'static str,
}

fn tercile(v: f64, cuts: [f64; 2]) -> usize {
    if v < cuts[0] {
        0
    } else if v < cuts[1] {
        1
    } else {
        2
    }
}

pub fn conclusion_phrase(grade: Grade, n: usize) -> &'static str {
    match grade {
        Grade::HighGrade => "high grade cancer",
        Grade::LowGrade => "low grade cancer",
        Grade::NormalOrInsufficient if n < INSUFFICIENT_BELOW => "insufficient information",
        Grade::NormalOrInsufficient => "normal",
    }
}

pub fn degree_words(scene: &Scene) -> DegreeWords {
    let s = SceneStats::compute(scene);
    let mitosis = match s.mitoses {
        0 => 0,
        1 | 2 => 1,
        _ => 2,
    };
    DegreeWords {
        pleomorphism: PLEO_WORDS[tercile(s.pleomorphism, PLEOMORPHISM_CUTS)],
        // Short nearest-neighbour distance means heavy crowding.
        crowding: CROWD_WORDS[2 - tercile(s.nn_distance, NN_DISTANCE_CUTS)],
        polarity: POLARITY_WORDS[2 - tercile(s.polarity, POLARITY_CUTS)],
        mitosis: MITOSIS_WORDS[mitosis],
        nucleoli: NUCLEOLI_WORDS[tercile(s.nucleoli, NUCLEOLI_CUTS)],
        conclusion: conclusion_phrase(scene.grade, s.n),
    }
}

fn template(style: usize, d: &DegreeWords) -> String {
    let DegreeWords {
        pleomorphism: p,
        crowding: c,
        polarity: o,
        mitosis: m,
        nucleoli: n,
        conclusion: z,
    } = *d;
    match style {
        0 => format!(
            "nuclear pleomorphism is {p} . cell crowding is {c} . polarity is {o} . \
             mitoses are {m} . nucleoli are {n} . conclusion : {z} ."
        ),
        1 => format!(
            "the nuclei show {p} pleomorphism . crowding of cells is {c} . nuclear polarity is {o} . \
             mitotic figures are {m} . nucleoli appear {n} . the diagnosis is {z} ."
        ),
        2 => format!(
            "{p} nuclear pleomorphism is seen , with {c} crowding . polarity of the cells is {o} . \
             mitotic activity is {m} . {n} nucleoli are noted . findings suggest {z} ."
        ),
        3 => format!(
            "there is {p} pleomorphism of nuclei . the cells show {c} crowding . cell polarity appears {o} . \
             mitoses : {m} . nucleoli : {n} . final conclusion : {z} ."
        ),
        _ => format!(
            "pleomorphism : {p} . crowding : {c} . polarity : {o} . mitosis : {m} . \
             nucleoli : {n} . impression : {z} ."
        ),
    }
}

/// Templated reference report, terminated by the end token.
pub fn render_report(scene: &Scene, variant_seed: u64) -> Vec<String> {
    let words = degree_words(scene);
    let style = (variant_seed % NUM_STYLES as u64) as usize;
    let mut tokens: Vec<String> = template(style, &words)
        .split_whitespace()
        .map(str::to_owned)
        .collect();
    tokens.push(EOS_TOKEN.to_owned());
    tokens
}
