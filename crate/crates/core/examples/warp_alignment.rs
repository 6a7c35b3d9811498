//! Bilinear warping by per-cell offsets: integer shifts move content,
//! half-cell shifts average neighbours, and out-of-grid samples read zero.

use satfuse::fusion::bev::{warp, OffsetField};
use satfuse::tensor::Tensor;

fn show(label: &str, t: &Tensor<f64>) {
    let w = t.shape()[1];
    println!("{label}");
    for row in t.data().chunks(w) {
        println!(
            "  {}",
            row.iter().map(|v| format!("{v:5.2}")).collect::<Vec<_>>().join(" ")
        );
    }
}

fn main() -> satfuse::Result<()> {
    let (h, w) = (4, 6);
    let f = Tensor::from_fn(&[h, w, 1], |i| (i % w) as f64 + 10.0 * (i / w) as f64);
    show("input (value = col + 10·row)", &f);
    show(
        "Δ = (0, 1): each cell reads its right neighbour",
        &warp(&f, &OffsetField::constant(h, w, 0.0, 1.0))?,
    );
    show(
        "Δ = (0, 0.5): mean of horizontal neighbours",
        &warp(&f, &OffsetField::constant(h, w, 0.0, 0.5))?,
    );
    show(
        "Δ = (-1, 0): reads the row above, zero off the grid",
        &warp(&f, &OffsetField::constant(h, w, -1.0, 0.0))?,
    );
    let same = warp(&f, &OffsetField::zeros(h, w))? == f;
    println!("Δ = 0 reproduces the input exactly: {same}");
    Ok(())
}
