//! A piecewise-constant field over the unit square: tile membership,
//! evaluation and the positive transform used for CPD standard deviations.

use dpms::diffmath::ParamStore;
use dpms::shbf::{FieldTransform, GridLayout, ShbfField};
use ndarray::{array, Array2};

fn main() -> dpms::Result<()> {
    // 6×6 tiles, each point covered by 2×2 of them
    let layout = GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[6, 6], 0.5)?;
    println!("{} tiles, {} per point", layout.n_tiles(), layout.cardinality());
    for p in [[0.0, 0.0], [0.3, 0.7], [1.0, 1.0]] {
        println!("{p:?} -> tiles {:?}", layout.membership(&p)?);
    }

    let mut store = ParamStore::new();
    let mean = ShbfField::new(&mut store, "mean", layout.clone(), FieldTransform::Identity, 0.0)?;
    let sd = ShbfField::new(&mut store, "sd", layout.clone(), FieldTransform::Positive, 0.5)?;
    // a ramp in the first coordinate
    let ramp = Array2::from_shape_fn((layout.n_tiles(), 1), |(j, _)| (j / 6) as f64 * 0.1);
    store.set_values(mean.coefficients, ramp)?;

    let points = array![[0.05, 0.5], [0.5, 0.5], [0.95, 0.5]];
    let m = mean.evaluate(&store, &points)?;
    let s = sd.evaluate(&store, &points)?;
    for i in 0..points.nrows() {
        println!("at {:?}: mean {:.3}, sd {:.3}", points.row(i).to_vec(), m[[i, 0]], s[[i, 0]]);
    }
    Ok(())
}
