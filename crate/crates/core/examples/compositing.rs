//! Layer compositing three ways: the over operator, the closed-form ordered
//! composite and log-space barycentric weights.

use recolor::compositor::{
    alphas_to_logweights, blend_activation, composite_direct, logweights_to_color, over, weights_to_alphas,
    AlphaVector,
};
use recolor::ColorPoint;

fn main() -> anyhow::Result<()> {
    let palette = [
        ColorPoint::new(0.1, 0.1, 0.3),
        ColorPoint::new(0.9, 0.8, 0.2),
        ColorPoint::new(0.8, 0.2, 0.2),
    ];
    let alphas = AlphaVector::from_layers(&[0.7, 0.4])?;

    // Painting bottom to top.
    let mut acc = palette[0];
    for (c, &a) in palette[1..].iter().zip(&alphas.as_slice()[1..]) {
        acc = over(*c, a, acc, 1.0).0;
    }
    let direct = composite_direct(&palette, &alphas)?;
    let weights = alphas_to_logweights(&alphas);
    let via_weights = logweights_to_color(&weights, &palette)?;
    println!("over operator  {acc:?}");
    println!("direct         {direct:?}");
    println!("log weights    {via_weights:?}");
    println!(
        "weights {:?} sum {:.12}",
        weights.weights().iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>(),
        weights.sum()
    );
    println!("recovered alphas {:?}", weights_to_alphas(&weights).as_slice());

    // The activation used during training: one logit per layer.
    let w = blend_activation(&[0.0, 0.0]);
    println!("logits (0, 0) -> weights {:?}", w.weights());
    Ok(())
}
