//! Stroke embeddings: shape (bidirectional LSTM) + order (table) + location (linear).

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{Init, Linear};
use crate::param::{ParamId, ParamStore};
use crate::sketch::{Sketch, Stroke};
use crate::tensor::Tensor;

/// Per-point input width: x, y and the two pen-state bits.
pub const POINT_FEATURES: usize = 4;

/// One LSTM direction. Gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn new(init: &mut Init<'_>, name: &str, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        init.scoped(name, |init| Self {
            w_input: init.uniform("w_input", POINT_FEATURES, 4 * hidden, bound),
            w_hidden: init.uniform("w_hidden", hidden, 4 * hidden, bound),
            bias: init.uniform("bias", 1, 4 * hidden, bound),
            hidden,
        })
    }

    /// Final hidden state of every sequence, run in lock-step over the batch.
    /// Sequences shorter than the longest hold their state once exhausted.
    fn final_states<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        seqs: &[Vec<[f64; 4]>],
    ) -> Result<Var<'t>> {
        let s = seqs.len();
        let h = self.hidden;
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);

        // Time-major stack of all inputs so the input projection is one matmul.
        let mut stacked = Tensor::zeros(steps * s, POINT_FEATURES);
        for t in 0..steps {
            for (row, seq) in seqs.iter().enumerate() {
                if let Some(p) = seq.get(t) {
                    for (c, v) in p.iter().enumerate() {
                        stacked.set(t * s + row, c, *v);
                    }
                }
            }
        }
        let projected = tape
            .leaf(stacked)
            .matmul(tape.param(store, self.w_input))?
            .add(tape.param(store, self.bias))?;
        let w_hidden = tape.param(store, self.w_hidden);

        let mut hidden = tape.leaf(Tensor::zeros(s, h));
        let mut cell = tape.leaf(Tensor::zeros(s, h));
        for t in 0..steps {
            let gates = projected
                .slice(0, t * s, s)?
                .add(hidden.matmul(w_hidden)?)?;
            let i = gates.slice(1, 0, h)?.sigmoid();
            let f = gates.slice(1, h, h)?.sigmoid();
            let g = gates.slice(1, 2 * h, h)?.tanh();
            let o = gates.slice(1, 3 * h, h)?.sigmoid();
            let next_cell = f.mul(cell)?.add(i.mul(g)?)?;
            let next_hidden = o.mul(next_cell.tanh())?;
            let active: Vec<f64> = seqs
                .iter()
                .map(|q| if t < q.len() { 1.0 } else { 0.0 })
                .collect();
            if active.iter().all(|&a| a == 1.0) {
                hidden = next_hidden;
                cell = next_cell;
            } else {
                let mask = tape.leaf(Tensor::matrix(s, 1, active)?);
                hidden = hidden.add(mask.mul(next_hidden.sub(hidden)?)?)?;
                cell = cell.add(mask.mul(next_cell.sub(cell)?)?)?;
            }
        }
        Ok(hidden)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EmbeddingParams {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
    pub shape_out: Linear,
    pub order_table: ParamId,
    pub location: Linear,
    pub width: usize,
    pub max_strokes: usize,
}

impl EmbeddingParams {
    pub fn new(init: &mut Init<'_>, width: usize, max_strokes: usize) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(Error::Invalid(format!(
                "embedding width must be even and positive, got {width}"
            )));
        }
        init.scoped("embedding", |init| {
            Ok(Self {
                forward: LstmDirection::new(init, "lstm_forward", width / 2),
                backward: LstmDirection::new(init, "lstm_backward", width / 2),
                shape_out: Linear::new(init, "shape_out", width, width),
                order_table: init.normal("order_table", max_strokes, width),
                location: Linear::new(init, "location", 2, width),
                width,
                max_strokes,
            })
        })
    }

    /// Shape embeddings for a batch of strokes, one row each.
    pub fn shape_embed_all<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        strokes: &[Stroke],
    ) -> Result<Var<'t>> {
        if strokes.iter().any(Stroke::is_empty) {
            return Err(Error::Invalid("cannot embed an empty stroke".into()));
        }
        let fwd: Vec<Vec<[f64; 4]>> = strokes
            .iter()
            .map(|s| s.points().iter().map(|p| p.features()).collect())
            .collect();
        let bwd: Vec<Vec<[f64; 4]>> = fwd
            .iter()
            .map(|s| s.iter().rev().copied().collect())
            .collect();
        let hf = self.forward.final_states(tape, store, &fwd)?;
        let hb = self.backward.final_states(tape, store, &bwd)?;
        let both = tape.concat(&[hf, hb], 1)?;
        self.shape_out.forward(tape, store, both)
    }

    pub fn shape_embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        stroke: &Stroke,
    ) -> Result<Var<'t>> {
        self.shape_embed_all(tape, store, std::slice::from_ref(stroke))
    }

    pub fn order_embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        indices: &[usize],
    ) -> Result<Var<'t>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.max_strokes) {
            return Err(Error::Invalid(format!(
                "stroke index {bad} out of range for max_strokes {}",
                self.max_strokes
            )));
        }
        tape.param(store, self.order_table).gather_rows(indices)
    }

    /// Location embeddings of the given `(x, y)` first points.
    pub fn location_embed<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        points: &[[f64; 2]],
    ) -> Result<Var<'t>> {
        let data: Vec<f64> = points.iter().flatten().copied().collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("location".into()));
        }
        let xy = tape.leaf(Tensor::matrix(points.len(), 2, data)?);
        self.location.forward(tape, store, xy)
    }

    /// The N×d stroke embedding matrix of a sketch.
    pub fn embed_sketch<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        sketch: &Sketch,
    ) -> Result<Var<'t>> {
        let n = sketch.num_strokes();
        if n == 0 {
            return Err(Error::Invalid("sketch has no strokes".into()));
        }
        let shape = self.shape_embed_all(tape, store, &sketch.strokes)?;
        let order = self.order_embed(tape, store, &(0..n).collect::<Vec<_>>())?;
        let firsts: Vec<[f64; 2]> = sketch
            .strokes
            .iter()
            .map(|s| [s.first().x, s.first().y])
            .collect();
        let location = self.location_embed(tape, store, &firsts)?;
        shape.add(order)?.add(location)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::gradcheck;

    fn setup(width: usize, max_strokes: usize) -> (ParamStore, EmbeddingParams) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let params =
            EmbeddingParams::new(&mut Init::new(&mut store, &mut rng), width, max_strokes).unwrap();
        (store, params)
    }

    fn stroke(coords: &[[f64; 2]]) -> Stroke {
        Stroke::from_xy(coords).unwrap()
    }

    fn sketch() -> Sketch {
        Sketch {
            strokes: vec![
                stroke(&[[0.1, 0.2], [0.3, 0.25], [0.5, 0.4]]),
                stroke(&[[0.9, 0.1]]),
                stroke(&[[0.2, 0.8], [0.4, 0.9], [0.45, 0.7], [0.6, 0.6]]),
            ],
            category: 0,
            stroke_components: None,
        }
    }

    #[test]
    fn odd_width_rejected() {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(EmbeddingParams::new(&mut Init::new(&mut store, &mut rng), 5, 4).is_err());
    }

    #[test]
    fn single_point_stroke_embeds() {
        let (store, p) = setup(6, 8);
        let tape = Tape::new();
        let v = p
            .shape_embed(&tape, &store, &stroke(&[[0.5, 0.5]]))
            .unwrap();
        assert_eq!(v.dims(), (1, 6));
        assert!(v.value().is_finite());
    }

    #[test]
    fn reversing_points_changes_shape_embedding() {
        let (store, p) = setup(6, 8);
        let s = stroke(&[[0.1, 0.2], [0.3, 0.9], [0.7, 0.4], [0.8, 0.8]]);
        let tape = Tape::new();
        let a = p.shape_embed(&tape, &store, &s).unwrap().value().clone();
        let b = p
            .shape_embed(&tape, &store, &s.reversed())
            .unwrap()
            .value()
            .clone();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn batched_shape_embedding_matches_individual_runs() {
        let (store, p) = setup(6, 8);
        let sk = sketch();
        let tape = Tape::new();
        let all = p
            .shape_embed_all(&tape, &store, &sk.strokes)
            .unwrap()
            .value()
            .clone();
        for (i, s) in sk.strokes.iter().enumerate() {
            let one = p.shape_embed(&tape, &store, s).unwrap().value().clone();
            for (a, b) in one.data().iter().zip(all.row(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn order_rows_are_table_rows() {
        let (mut store, p) = setup(4, 64);
        let tape = Tape::new();
        let a = p.order_embed(&tape, &store, &[3]).unwrap().value().clone();
        let b = p.order_embed(&tape, &store, &[3]).unwrap().value().clone();
        assert_eq!(a, b);
        assert!(p.order_embed(&tape, &store, &[64]).is_err());

        // Gradient through row 2 leaves every other row untouched.
        let tape = Tape::new();
        let loss = p.order_embed(&tape, &store, &[2]).unwrap().sum();
        tape.backward(loss, &mut store).unwrap();
        let g = store.get(p.order_table).grad_or_zero();
        for r in 0..64 {
            let expected = if r == 2 { 1.0 } else { 0.0 };
            assert!(g.row(r).iter().all(|&v| v == expected));
        }
    }

    #[test]
    fn location_is_linear_without_bias() {
        let (mut store, p) = setup(4, 8);
        let tape = Tape::new();
        let one = p
            .location_embed(&tape, &store, &[[0.3, 0.7]])
            .unwrap()
            .value()
            .clone();
        let two = p
            .location_embed(&tape, &store, &[[0.6, 1.4]])
            .unwrap()
            .value()
            .clone();
        for (a, b) in one.data().iter().zip(two.data()) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
        store.get_mut(p.location.weight).value = Tensor::zeros(2, 4);
        let tape = Tape::new();
        let zero = p.location_embed(&tape, &store, &[[0.3, 0.7]]).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn location_gradient_matches_finite_differences() {
        let (store, p) = setup(4, 8);
        let report = gradcheck::check_inputs(
            &[Tensor::from_rows(&[vec![0.3, 0.7], vec![0.1, 0.4]])],
            |tape, xs| {
                let w = tape.param(&store, p.location.weight);
                let b = tape.param(&store, p.location.bias);
                Ok(xs[0].matmul(w)?.add(b)?.tanh().sum())
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn sketch_embedding_is_sum_of_three_terms() {
        let (store, p) = setup(6, 8);
        let sk = sketch();
        let tape = Tape::new();
        let rows = p.embed_sketch(&tape, &store, &sk).unwrap().value().clone();
        assert_eq!(rows.dims(), (3, 6));
        for (i, s) in sk.strokes.iter().enumerate() {
            let sh = p.shape_embed(&tape, &store, s).unwrap().value().clone();
            let o = p.order_embed(&tape, &store, &[i]).unwrap().value().clone();
            let l = p
                .location_embed(&tape, &store, &[[s.first().x, s.first().y]])
                .unwrap()
                .value()
                .clone();
            for c in 0..6 {
                let expected = sh.get(0, c) + o.get(0, c) + l.get(0, c);
                assert!((rows.get(i, c) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_order_and_location_leaves_shape() {
        let (mut store, p) = setup(6, 8);
        store.get_mut(p.order_table).value = Tensor::zeros(8, 6);
        store.get_mut(p.location.weight).value = Tensor::zeros(2, 6);
        let sk = sketch();
        let tape = Tape::new();
        let rows = p.embed_sketch(&tape, &store, &sk).unwrap().value().clone();
        let shapes = p
            .shape_embed_all(&tape, &store, &sk.strokes)
            .unwrap()
            .value()
            .clone();
        assert!(rows.max_abs_diff(&shapes) == 0.0);
    }

    #[test]
    fn swapping_strokes_keeps_order_rows_fixed() {
        let (store, p) = setup(6, 8);
        let sk = sketch();
        let mut swapped = sk.clone();
        swapped.strokes.swap(0, 1);
        let tape = Tape::new();
        let a = p.embed_sketch(&tape, &store, &sk).unwrap().value().clone();
        let b = p
            .embed_sketch(&tape, &store, &swapped)
            .unwrap()
            .value()
            .clone();
        let order = p
            .order_embed(&tape, &store, &[0, 1])
            .unwrap()
            .value()
            .clone();
        // Removing the order terms, row 0 of the swapped sketch is row 1 of the original.
        for c in 0..6 {
            let a1 = a.get(1, c) - order.get(1, c);
            let b0 = b.get(0, c) - order.get(0, c);
            assert!((a1 - b0).abs() < 1e-14);
        }
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let (mut store, p) = setup(4, 4);
        let sk = sketch();
        let report = gradcheck::check_params(&mut store, |tape, store| {
            Ok(p.embed_sketch(tape, store, &sk)?.tanh().sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
