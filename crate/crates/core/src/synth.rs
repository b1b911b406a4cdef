//! Deterministic synthetic sketches built from component stroke archetypes.
//!
//! Every category is a fixed set of components, each drawn from a small
//! archetype (line, arc, zigzag, loop) at a canonical placement. Samples add
//! coordinate jitter and shuffle stroke order within each component.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sketch::{normalize, Dataset, LabelSpace, Sketch, Split, Stroke};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Archetype {
    Line,
    Arc,
    Zigzag,
    Loop,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::Line,
        Archetype::Arc,
        Archetype::Zigzag,
        Archetype::Loop,
    ];

    /// Unit-scale template point at parameter `t` in [0, 1].
    fn template(self, t: f64) -> [f64; 2] {
        match self {
            Archetype::Line => [-1.0 + 2.0 * t, 0.0],
            Archetype::Arc => {
                let a = PI * (1.0 - t);
                [a.cos(), a.sin()]
            }
            Archetype::Zigzag => {
                let phase = (t * 3.0).fract();
                let tri = if phase < 0.5 {
                    4.0 * phase - 1.0
                } else {
                    3.0 - 4.0 * phase
                };
                [-1.0 + 2.0 * t, 0.4 * tri]
            }
            Archetype::Loop => {
                let a = 2.0 * PI * t;
                [a.cos(), a.sin()]
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Archetype::Line => "line",
            Archetype::Arc => "arc",
            Archetype::Zigzag => "zigzag",
            Archetype::Loop => "loop",
        }
    }
}

/// One component type: an archetype drawn as one or more strokes at a fixed place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub archetype: Archetype,
    /// Additional strokes repeat the archetype rotated by 90 degrees each.
    pub strokes: usize,
    pub center: [f64; 2],
    pub scale: f64,
    /// Rotation in radians.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_categories: usize,
    pub num_components: usize,
    pub samples_per_category: usize,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
    #[serde(default = "default_points")]
    pub points_per_stroke: usize,
    /// Explicit component designs; generated from the seed when absent.
    #[serde(default)]
    pub components: Option<Vec<ComponentSpec>>,
    /// Explicit component ids per category; generated from the seed when absent.
    #[serde(default)]
    pub categories: Option<Vec<Vec<usize>>>,
}

fn default_jitter() -> f64 {
    0.02
}

fn default_points() -> usize {
    8
}

impl SynthSpec {
    pub fn new(num_categories: usize, num_components: usize, samples_per_category: usize) -> Self {
        Self {
            num_categories,
            num_components,
            samples_per_category,
            jitter: default_jitter(),
            points_per_stroke: default_points(),
            components: None,
            categories: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn design_components(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<ComponentSpec> {
    (0..spec.num_components)
        .map(|j| ComponentSpec {
            archetype: Archetype::ALL[j % Archetype::ALL.len()],
            strokes: 1 + (j / Archetype::ALL.len()) % 2,
            center: [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)],
            scale: rng.random_range(0.1..0.18),
            angle: rng.random_range(0.0..PI),
        })
        .collect()
}

fn design_categories(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    let k = spec.num_components;
    let max_size = k.min(4);
    let min_size = 2.min(k);
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(spec.num_categories);
    let mut attempts = 0;
    while out.len() < spec.num_categories {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Invalid(format!(
                "cannot find {} distinct component sets over {k} components",
                spec.num_categories
            )));
        }
        let size = rng.random_range(min_size..=max_size);
        let mut ids: Vec<usize> = (0..k).collect();
        ids.shuffle(rng);
        ids.truncate(size);
        ids.sort_unstable();
        if !out.contains(&ids) {
            out.push(ids);
        }
    }
    Ok(out)
}

fn draw_component(
    comp: &ComponentSpec,
    points: usize,
    jitter: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Stroke> {
    let noise = Normal::new(0.0, jitter.max(1e-12)).expect("finite jitter");
    let offset = [noise.sample(rng), noise.sample(rng)];
    let scale = comp.scale * (1.0 + noise.sample(rng));
    (0..comp.strokes.max(1))
        .map(|s| {
            let angle = comp.angle + s as f64 * PI / 2.0;
            let (sin, cos) = angle.sin_cos();
            let coords: Vec<[f64; 2]> = (0..points)
                .map(|p| {
                    let t = if points == 1 {
                        0.0
                    } else {
                        p as f64 / (points - 1) as f64
                    };
                    let [u, v] = comp.archetype.template(t);
                    [
                        comp.center[0]
                            + offset[0]
                            + scale * (cos * u - sin * v)
                            + noise.sample(rng) * 0.25,
                        comp.center[1]
                            + offset[1]
                            + scale * (sin * u + cos * v)
                            + noise.sample(rng) * 0.25,
                    ]
                })
                .collect();
            Stroke::from_xy(&coords).expect("points > 0")
        })
        .collect()
}

/// Generates `num_categories * samples_per_category` fully labelled sketches,
/// interleaved by category.
pub fn synthesize_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.num_categories == 0 || spec.num_components == 0 {
        return Err(Error::Invalid(
            "need at least one category and one component".into(),
        ));
    }
    if spec.points_per_stroke == 0 {
        return Err(Error::Invalid("points_per_stroke must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let components = match &spec.components {
        Some(c) if c.len() != spec.num_components => {
            return Err(Error::Invalid(format!(
                "{} component designs for num_components {}",
                c.len(),
                spec.num_components
            )))
        }
        Some(c) => c.clone(),
        None => design_components(spec, &mut rng),
    };
    let categories = match &spec.categories {
        Some(c) => {
            if c.len() != spec.num_categories {
                return Err(Error::Invalid(format!(
                    "{} category designs for num_categories {}",
                    c.len(),
                    spec.num_categories
                )));
            }
            if let Some(i) = c.iter().position(Vec::is_empty) {
                return Err(Error::Invalid(format!("category {i} has no components")));
            }
            if c.iter().flatten().any(|&j| j >= spec.num_components) {
                return Err(Error::Invalid(
                    "category references unknown component".into(),
                ));
            }
            c.clone()
        }
        None => design_categories(spec, &mut rng)?,
    };

    let category_names = (0..spec.num_categories)
        .map(|c| format!("category_{c}"))
        .collect();
    let component_names = components
        .iter()
        .enumerate()
        .map(|(j, c)| format!("component_{j}_{}", c.archetype.name()))
        .collect();
    let composition = categories
        .iter()
        .map(|ids| (0..spec.num_components).map(|j| ids.contains(&j)).collect())
        .collect();
    let label_space = LabelSpace::new(category_names, component_names, composition)?;

    let mut samples = Vec::with_capacity(spec.num_categories * spec.samples_per_category);
    for _ in 0..spec.samples_per_category {
        for (c, ids) in categories.iter().enumerate() {
            let mut strokes = Vec::new();
            let mut labels = Vec::new();
            for &j in ids {
                let mut drawn = draw_component(
                    &components[j],
                    spec.points_per_stroke,
                    spec.jitter,
                    &mut rng,
                );
                drawn.shuffle(&mut rng);
                labels.extend(std::iter::repeat_n(j, drawn.len()));
                strokes.extend(drawn);
            }
            let sketch = Sketch {
                strokes,
                category: c,
                stroke_components: Some(labels),
            };
            samples.push(normalize(&sketch)?);
        }
    }
    Ok(Dataset {
        samples,
        label_space,
        split: Split::Train,
    })
}
