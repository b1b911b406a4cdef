//! Sketch data model, newline-delimited record files, and label spaces.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_STROKES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenState {
    Touching,
    Lifting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub pen: PenState,
}

impl Point {
    /// `[x, y, touching, lifting]`.
    pub fn features(&self) -> [f64; 4] {
        let (t, l) = match self.pen {
            PenState::Touching => (1.0, 0.0),
            PenState::Lifting => (0.0, 1.0),
        };
        [self.x, self.y, t, l]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stroke {
    points: Vec<Point>,
}

impl Stroke {
    /// Builds a stroke from coordinates; the last point lifts the pen.
    pub fn from_xy(coords: &[[f64; 2]]) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Data("stroke has no points".into()));
        }
        let last = coords.len() - 1;
        let points = coords
            .iter()
            .enumerate()
            .map(|(i, &[x, y])| Point {
                x,
                y,
                pen: if i == last {
                    PenState::Lifting
                } else {
                    PenState::Touching
                },
            })
            .collect();
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> &Point {
        &self.points[0]
    }

    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }

    pub fn reversed(&self) -> Self {
        let coords: Vec<[f64; 2]> = self.xy().into_iter().rev().collect();
        Self::from_xy(&coords).expect("non-empty")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sketch {
    pub strokes: Vec<Stroke>,
    pub category: usize,
    pub stroke_components: Option<Vec<usize>>,
}

impl Sketch {
    pub fn num_strokes(&self) -> usize {
        self.strokes.len()
    }

    /// Component ids present in the stroke labels, if any.
    pub fn present_components(&self) -> Option<BTreeSet<usize>> {
        self.stroke_components
            .as_ref()
            .map(|c| c.iter().copied().collect())
    }
}

/// Scales coordinates uniformly so the longer bounding-box side spans [0, 1]
/// and the shorter side is centred. A sketch with a zero-size bounding box
/// collapses to (0.5, 0.5).
pub fn normalize(sketch: &Sketch) -> Result<Sketch> {
    let mut out = sketch.clone();
    normalize_strokes(&mut out.strokes)?;
    Ok(out)
}

pub fn normalize_strokes(strokes: &mut [Stroke]) -> Result<()> {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in strokes.iter().flat_map(|s| &s.points) {
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::NonFinite(format!("point ({}, {})", p.x, p.y)));
        }
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    let (w, h) = (max_x - min_x, max_y - min_y);
    let side = w.max(h);
    for p in strokes.iter_mut().flat_map(|s| &mut s.points) {
        if side == 0.0 {
            p.x = 0.5;
            p.y = 0.5;
        } else {
            p.x = (p.x - min_x) / side + (1.0 - w / side) / 2.0;
            p.y = (p.y - min_y) / side + (1.0 - h / side) / 2.0;
        }
    }
    Ok(())
}

/// Category names, component names, and which components each category contains.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSpace {
    pub categories: Vec<String>,
    pub components: Vec<String>,
    /// `composition[c][j]` is true iff category `c` contains component `j`.
    pub composition: Vec<Vec<bool>>,
}

#[derive(Serialize, Deserialize)]
struct LabelSpaceFile {
    categories: Vec<String>,
    components: Vec<String>,
    composition: BTreeMap<String, Vec<String>>,
}

impl LabelSpace {
    pub fn new(
        categories: Vec<String>,
        components: Vec<String>,
        composition: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let ls = Self {
            categories,
            components,
            composition,
        };
        ls.validate()?;
        Ok(ls)
    }

    fn validate(&self) -> Result<()> {
        if self.categories.is_empty() || self.components.is_empty() {
            return Err(Error::Data(
                "label space needs at least one category and one component".into(),
            ));
        }
        if self.composition.len() != self.categories.len() {
            return Err(Error::Data(format!(
                "composition has {} rows for {} categories",
                self.composition.len(),
                self.categories.len()
            )));
        }
        for (c, row) in self.composition.iter().enumerate() {
            if row.len() != self.components.len() {
                return Err(Error::Data(format!("composition row {c} has wrong length")));
            }
            if !row.iter().any(|&b| b) {
                return Err(Error::Data(format!(
                    "category '{}' has no components",
                    self.categories[c]
                )));
            }
        }
        Ok(())
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn category_id(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn component_id(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c == name)
    }

    /// The per-category existence vector over component types.
    pub fn composition_vector(&self, category: usize) -> Result<Vec<f64>> {
        let row = self
            .composition
            .get(category)
            .ok_or_else(|| Error::Invalid(format!("unknown category id {category}")))?;
        Ok(row.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
    }

    /// Derives the composition table as the union of components observed per
    /// category in labelled sketches.
    pub fn from_observed(
        categories: Vec<String>,
        components: Vec<String>,
        sketches: &[Sketch],
    ) -> Result<Self> {
        let mut composition = vec![vec![false; components.len()]; categories.len()];
        for s in sketches {
            let labels = s.stroke_components.as_ref().ok_or_else(|| {
                Error::Data("cannot derive composition from unlabelled sketch".into())
            })?;
            for &j in labels {
                let row = composition.get_mut(s.category).ok_or_else(|| {
                    Error::Data(format!("category id {} out of range", s.category))
                })?;
                *row.get_mut(j)
                    .ok_or_else(|| Error::Data(format!("component id {j} out of range")))? = true;
            }
        }
        Self::new(categories, components, composition)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: LabelSpaceFile = serde_json::from_str(text)?;
        let mut composition = vec![vec![false; raw.components.len()]; raw.categories.len()];
        for (cat, parts) in &raw.composition {
            let c = raw
                .categories
                .iter()
                .position(|n| n == cat)
                .ok_or_else(|| {
                    Error::Data(format!("composition names unknown category '{cat}'"))
                })?;
            for part in parts {
                let j = raw
                    .components
                    .iter()
                    .position(|n| n == part)
                    .ok_or_else(|| {
                        Error::Data(format!("composition names unknown component '{part}'"))
                    })?;
                composition[c][j] = true;
            }
        }
        Self::new(raw.categories, raw.components, composition)
    }

    pub fn to_json(&self) -> String {
        let composition = self
            .categories
            .iter()
            .zip(&self.composition)
            .map(|(name, row)| {
                let parts = row
                    .iter()
                    .zip(&self.components)
                    .filter(|(b, _)| **b)
                    .map(|(_, n)| n.clone())
                    .collect();
                (name.clone(), parts)
            })
            .collect();
        let raw = LabelSpaceFile {
            categories: self.categories.clone(),
            components: self.components.clone(),
            composition,
        };
        serde_json::to_string_pretty(&raw).expect("label space serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sketch>,
    pub label_space: LabelSpace,
    pub split: Split,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CategoryField {
    Id(usize),
    Name(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordIn {
    category: CategoryField,
    strokes: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    stroke_components: Option<Vec<usize>>,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    category: &'a str,
    strokes: Vec<Vec<[f64; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stroke_components: Option<&'a Vec<usize>>,
}

/// Validates a sketch against a label space and stroke bound.
pub fn validate_sketch(
    sketch: &Sketch,
    label_space: &LabelSpace,
    max_strokes: usize,
) -> Result<()> {
    let n = sketch.num_strokes();
    if n == 0 {
        return Err(Error::Data("sketch has no strokes".into()));
    }
    if n > max_strokes {
        return Err(Error::Data(format!(
            "{n} strokes exceeds max_strokes {max_strokes}"
        )));
    }
    if sketch.strokes.iter().any(Stroke::is_empty) {
        return Err(Error::Data("stroke has no points".into()));
    }
    if sketch.category >= label_space.num_categories() {
        return Err(Error::Data(format!(
            "unknown category id {}",
            sketch.category
        )));
    }
    if let Some(labels) = &sketch.stroke_components {
        if labels.len() != n {
            return Err(Error::Data(format!(
                "stroke_components has {} entries for {n} strokes",
                labels.len()
            )));
        }
        let k = label_space.num_components();
        let allowed = &label_space.composition[sketch.category];
        for &j in labels {
            if j >= k {
                return Err(Error::Data(format!("unknown component id {j}")));
            }
            if !allowed[j] {
                return Err(Error::Data(format!(
                    "component '{}' is not part of category '{}'",
                    label_space.components[j], label_space.categories[sketch.category]
                )));
            }
        }
    }
    Ok(())
}

/// Parses one record line into a normalized, validated sketch.
pub fn parse_record(line: &str, label_space: &LabelSpace, max_strokes: usize) -> Result<Sketch> {
    let rec: RecordIn = serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?;
    let category = match rec.category {
        CategoryField::Id(id) => id,
        CategoryField::Name(name) => label_space
            .category_id(&name)
            .ok_or_else(|| Error::Data(format!("unknown category '{name}'")))?,
    };
    let strokes = rec
        .strokes
        .iter()
        .map(|s| Stroke::from_xy(s))
        .collect::<Result<Vec<_>>>()?;
    let sketch = Sketch {
        strokes,
        category,
        stroke_components: rec.stroke_components,
    };
    validate_sketch(&sketch, label_space, max_strokes)?;
    normalize(&sketch)
}

pub fn parse_records(
    text: &str,
    label_space: &LabelSpace,
    max_strokes: usize,
) -> Result<Vec<Sketch>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_record(l, label_space, max_strokes).map_err(|e| Error::Record {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_stroke_file(
    path: impl AsRef<Path>,
    label_space: &LabelSpace,
    max_strokes: usize,
    split: Split,
) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sketch = parse_record(&line, label_space, max_strokes).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sketch);
    }
    Ok(Dataset {
        samples,
        label_space: label_space.clone(),
        split,
    })
}

pub fn record_line(sketch: &Sketch, label_space: &LabelSpace) -> String {
    let rec = RecordOut {
        category: &label_space.categories[sketch.category],
        strokes: sketch.strokes.iter().map(Stroke::xy).collect(),
        stroke_components: sketch.stroke_components.as_ref(),
    };
    serde_json::to_string(&rec).expect("record serializes")
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_strokes(&self) -> usize {
        self.samples.iter().map(Sketch::num_strokes).sum()
    }

    pub fn has_stroke_labels(&self) -> bool {
        !self.samples.is_empty() && self.samples.iter().all(|s| s.stroke_components.is_some())
    }

    pub fn write_records(&self, mut out: impl Write) -> Result<()> {
        for s in &self.samples {
            writeln!(out, "{}", record_line(s, &self.label_space))?;
        }
        Ok(())
    }

    pub fn to_records(&self) -> String {
        let mut buf = Vec::new();
        self.write_records(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("utf-8 records")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_records(std::io::BufWriter::new(file))
    }

    /// First `train_per_category` samples of each category train, the rest test.
    pub fn split_per_category(&self, train_per_category: usize) -> (Dataset, Dataset) {
        let mut seen = vec![0usize; self.label_space.num_categories()];
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for s in &self.samples {
            if seen[s.category] < train_per_category {
                train.push(s.clone());
            } else {
                test.push(s.clone());
            }
            seen[s.category] += 1;
        }
        let make = |samples, split| Dataset {
            samples,
            label_space: self.label_space.clone(),
            split,
        };
        (make(train, Split::Train), make(test, Split::Test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn airplane_space() -> LabelSpace {
        LabelSpace::from_json(
            r#"{
                "categories": ["airplane", "house"],
                "components": ["fuselage", "wings", "tail", "roof", "wall", "door"],
                "composition": {
                    "airplane": ["fuselage", "wings", "tail"],
                    "house": ["roof", "wall", "door"]
                }
            }"#,
        )
        .unwrap()
    }

    fn sketch(strokes: &[&[[f64; 2]]]) -> Sketch {
        Sketch {
            strokes: strokes
                .iter()
                .map(|s| Stroke::from_xy(s).unwrap())
                .collect(),
            category: 0,
            stroke_components: None,
        }
    }

    #[test]
    fn pen_state_lifts_on_last_point_only() {
        let s = Stroke::from_xy(&[[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]]).unwrap();
        let pens: Vec<_> = s.points().iter().map(|p| p.pen).collect();
        assert_eq!(
            pens,
            vec![PenState::Touching, PenState::Touching, PenState::Lifting]
        );
        assert_eq!(s.points()[2].features(), [2.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn one_stroke_record() {
        let ls = airplane_space();
        let s = parse_record(
            r#"{"category":"airplane","strokes":[[[0,0],[1,1],[2,0]]]}"#,
            &ls,
            64,
        )
        .unwrap();
        assert_eq!(s.num_strokes(), 1);
        assert_eq!(s.strokes[0].len(), 3);
        assert_eq!(s.category, 0);
    }

    #[test]
    fn integer_category_accepted() {
        let ls = airplane_space();
        let s = parse_record(r#"{"category":1,"strokes":[[[0,0]]]}"#, &ls, 64).unwrap();
        assert_eq!(s.category, 1);
    }

    #[test]
    fn wrong_length_components_rejected() {
        let ls = airplane_space();
        let err = parse_record(
            r#"{"category":"airplane","strokes":[[[0,0]],[[1,1]]],"stroke_components":[0]}"#,
            &ls,
            64,
        );
        assert!(err.is_err());
    }

    #[test]
    fn component_outside_category_rejected() {
        let ls = airplane_space();
        let err = parse_record(
            r#"{"category":"airplane","strokes":[[[0,0]]],"stroke_components":[3]}"#,
            &ls,
            64,
        )
        .unwrap_err();
        assert!(err.to_string().contains("roof"), "{err}");
    }

    #[test]
    fn unknown_labels_rejected() {
        let ls = airplane_space();
        assert!(parse_record(r#"{"category":"boat","strokes":[[[0,0]]]}"#, &ls, 64).is_err());
        assert!(parse_record(r#"{"category":7,"strokes":[[[0,0]]]}"#, &ls, 64).is_err());
        assert!(parse_record(
            r#"{"category":0,"strokes":[[[0,0]]],"stroke_components":[9]}"#,
            &ls,
            64
        )
        .is_err());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let ls = airplane_space();
        let text = "{\"category\":0,\"strokes\":[[[0,0]]]}\n\nnot json\n";
        match parse_records(text, &ls, 64) {
            Err(Error::Record { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    #[test]
    fn too_many_strokes_rejected() {
        let ls = airplane_space();
        let strokes = vec!["[[0,0]]"; 3].join(",");
        let line = format!(r#"{{"category":0,"strokes":[{strokes}]}}"#);
        assert!(parse_record(&line, &ls, 2).is_err());
        assert!(parse_record(&line, &ls, 3).is_ok());
    }

    #[test]
    fn composition_vectors() {
        let ls = airplane_space();
        assert_eq!(
            ls.composition_vector(0).unwrap(),
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
        assert!(ls.composition_vector(2).is_err());

        let defined = LabelSpace::new(
            vec!["c".into()],
            (0..6).map(|j| format!("p{j}")).collect(),
            vec![vec![true, false, false, true, false, false]],
        )
        .unwrap();
        assert_eq!(
            defined.composition_vector(0).unwrap(),
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );

        let full = LabelSpace::new(
            vec!["all".into()],
            vec!["a".into(), "b".into()],
            vec![vec![true, true]],
        )
        .unwrap();
        assert_eq!(full.composition_vector(0).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn category_without_components_rejected() {
        assert!(LabelSpace::new(vec!["c".into()], vec!["a".into()], vec![vec![false]]).is_err());
    }

    #[test]
    fn label_space_json_round_trip() {
        let ls = airplane_space();
        assert_eq!(LabelSpace::from_json(&ls.to_json()).unwrap(), ls);
    }

    #[test]
    fn derived_composition_is_union_of_observed() {
        let mut a = sketch(&[&[[0.0, 0.0]], &[[1.0, 1.0]]]);
        a.stroke_components = Some(vec![0, 2]);
        let mut b = sketch(&[&[[0.0, 0.0]]]);
        b.stroke_components = Some(vec![1]);
        let ls = LabelSpace::from_observed(
            vec!["x".into()],
            vec!["p".into(), "q".into(), "r".into()],
            &[a, b],
        )
        .unwrap();
        assert_eq!(ls.composition, vec![vec![true, true, true]]);
    }

    #[test]
    fn corner_maps_to_origin() {
        let s = normalize(&sketch(&[&[[2.0, 3.0], [6.0, 7.0]]])).unwrap();
        assert_eq!(s.strokes[0].xy(), vec![[0.0, 0.0], [1.0, 1.0]]);
    }

    #[test]
    fn shorter_side_is_centred() {
        // x spans [10, 20], y spans [30, 60]: side 30, x offset (1 - 10/30) / 2.
        let s = normalize(&sketch(&[&[[10.0, 30.0], [20.0, 60.0], [10.0, 45.0]]])).unwrap();
        let [x, y] = s.strokes[0].xy()[2];
        assert!(
            (x - 1.0 / 3.0).abs() < 1e-12 && (y - 0.5).abs() < 1e-12,
            "({x}, {y})"
        );
    }

    #[test]
    fn single_point_sketch_maps_to_centre() {
        let s = normalize(&sketch(&[&[[4.0, -2.0]], &[[4.0, -2.0]]])).unwrap();
        assert_eq!(s.strokes[1].xy(), vec![[0.5, 0.5]]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(normalize(&sketch(&[&[[f64::NAN, 0.0]]])).is_err());
    }

    #[test]
    fn records_round_trip() {
        let ls = airplane_space();
        let text = concat!(
            r#"{"category":"airplane","strokes":[[[0,0],[4,2]],[[1,1]]],"stroke_components":[0,2]}"#,
            "\n",
            r#"{"category":"house","strokes":[[[5,5],[5,9],[7,9]]]}"#,
            "\n"
        );
        let ds = Dataset {
            samples: parse_records(text, &ls, 64).unwrap(),
            label_space: ls.clone(),
            split: Split::Train,
        };
        let again = parse_records(&ds.to_records(), &ls, 64).unwrap();
        assert_eq!(again, ds.samples);
    }
}
