//! Deterministic seeded stand-ins for live model endpoints.
//!
//! Generated texts carry their synthetic utility on a trailer line so the
//! mock judge can compare candidates without a model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    content_digest, derive_stream, BackendError, Generator, GeneratorRequest, Judge, JudgeRequest,
    MockSettings, Side, Verdict,
};

const TRAILER_PREFIX: &str = "#% mock-utility=";

const COMPONENTS: &[&str] = &[
    "InputInterface",
    "ModelCore",
    "NumericalSolver",
    "DataStore",
    "Visualization",
    "Controller",
    "Analysis",
    "Configuration",
    "ErrorReporting",
    "Validation",
    "Documentation",
    "HelpSystem",
];

/// Synthetic utility encoded in a mock artifact, if any.
pub fn mock_utility(content: &str) -> Option<f64> {
    content
        .lines()
        .last()
        .and_then(|line| line.strip_prefix(TRAILER_PREFIX))
        .and_then(|value| value.trim().parse().ok())
}

/// `content` without its mock trailer line.
pub fn strip_mock_trailer(content: &str) -> &str {
    match content.rfind('\n') {
        Some(pos) if content[pos + 1..].starts_with(TRAILER_PREFIX) => &content[..pos],
        None if content.starts_with(TRAILER_PREFIX) => "",
        _ => content,
    }
}

/// Appends a utility trailer to `body`.
pub fn with_mock_utility(body: &str, utility: f64) -> String {
    format!("{body}\n{TRAILER_PREFIX}{utility}")
}

fn unit_interval(key: u64) -> f64 {
    (key >> 11) as f64 / (1u64 << 53) as f64
}

fn digest_key(text: &str) -> u64 {
    u64::from_str_radix(&content_digest(text)[..16], 16).expect("hex digest")
}

fn short_digest(text: &str) -> String {
    content_digest(text)[..8].to_string()
}

#[derive(Debug, Clone)]
pub struct MockGenerator {
    name: String,
    settings: MockSettings,
}

impl MockGenerator {
    pub fn new(name: impl Into<String>, settings: MockSettings) -> Self {
        Self {
            name: name.into(),
            settings,
        }
    }

    fn sample(&self, req: &GeneratorRequest, index: usize) -> String {
        let key = derive_stream(&[
            req.seed,
            req.target_level as u64,
            index as u64,
            digest_key(&req.parent_content),
            digest_key(&req.context),
        ]);
        let utility = match (req.target_level, mock_utility(&req.parent_content)) {
            (level, Some(inherited)) if level >= 2 => inherited,
            _ => unit_interval(key),
        };
        let pick = |salt: u64, count: usize| -> Vec<&'static str> {
            let mut names = COMPONENTS.to_vec();
            names.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_stream(&[key, salt])));
            names.truncate(count);
            names
        };
        let parent_tag = short_digest(&req.parent_content);
        let body = match req.target_level {
            0 => {
                let headline = req.parent_content.lines().next().unwrap_or("").trim();
                let headline: String = headline.chars().take(100).collect();
                let mut text = format!("Specification for: {headline}\n\nComponents:\n");
                for (i, name) in pick(0, 5 + index % 4).iter().enumerate() {
                    text.push_str(&format!("{}. {name}: responsibilities of the {name} component.\n", i + 1));
                }
                text.push_str(&format!("Variant {index}, seed {}.", req.seed));
                text
            }
            1 => {
                let mut text = format!("@startuml\n' design {index} refining {parent_tag}\n");
                let classes = pick(1, 4 + index % 5);
                for name in &classes {
                    text.push_str(&format!("class {name} {{\n  +run()\n}}\n"));
                }
                for pair in classes.windows(2) {
                    text.push_str(&format!("{} --> {}\n", pair[0], pair[1]));
                }
                text.push_str("@enduml");
                text
            }
            _ => {
                let mut text = format!("# program {index} implementing design {parent_tag}\n");
                for line in strip_mock_trailer(&req.parent_content).lines() {
                    if let Some(name) = line.strip_prefix("class ").and_then(|l| l.split_whitespace().next()) {
                        text.push_str(&format!("\nclass {name}:\n    def run(self):\n        return \"{name}\"\n"));
                    }
                }
                text.push_str("\n\ndef main():\n    print(\"ok\")\n");
                text
            }
        };
        with_mock_utility(&body, utility)
    }
}

impl Generator for MockGenerator {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn generate(&self, req: &GeneratorRequest) -> Result<Vec<String>, BackendError> {
        req.validate()?;
        if self.settings.fail_generation_at_level == Some(req.target_level) {
            return Err(BackendError::Injected(format!(
                "mock generator configured to fail at level {}",
                req.target_level
            )));
        }
        Ok((0..req.sample_count).map(|i| self.sample(req, i)).collect())
    }

    fn summarize(&self, material: &str, budget: usize) -> Result<String, BackendError> {
        Ok(material.chars().take(budget).collect())
    }
}

#[derive(Debug, Clone)]
pub struct MockJudge {
    name: String,
    settings: MockSettings,
}

impl MockJudge {
    pub fn new(name: impl Into<String>, settings: MockSettings) -> Self {
        Self {
            name: name.into(),
            settings,
        }
    }

    pub fn with_noise(name: impl Into<String>, noise_p: f64) -> Self {
        Self::new(
            name,
            MockSettings {
                noise_p,
                ..MockSettings::default()
            },
        )
    }
}

impl Judge for MockJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn judge(&self, req: &JudgeRequest, stream: u64) -> Result<Verdict, BackendError> {
        req.validate()?;
        if self.settings.fail_judging {
            return Err(BackendError::Injected("mock judge configured to fail".into()));
        }
        let tag = |text: &str| {
            mock_utility(text)
                .ok_or_else(|| BackendError::InvalidRequest("mock judge needs utility-tagged candidates".into()))
        };
        let (a, b) = (tag(&req.candidate_a)?, tag(&req.candidate_b)?);
        let mut winner = if a >= b { Side::First } else { Side::Second };
        if self.settings.noise_p < 1.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            if rng.random::<f64>() >= self.settings.noise_p {
                winner = match winner {
                    Side::First => Side::Second,
                    Side::Second => Side::First,
                };
            }
        }
        let (marker, ours, theirs) = match winner {
            Side::First => (1, a, b),
            Side::Second => (2, b, a),
        };
        Ok(Verdict {
            winner,
            justification: format!(
                "Candidate [{marker}] covers the specification more completely (mock score {ours:.3} against {theirs:.3})."
            ),
        })
    }
}
