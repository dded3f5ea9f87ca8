//! Builds a small unrolled network, evaluates every training loss on one
//! slice and spot-checks a gradient entry against central differences.
//!
//! cargo run --release --example unrolled_gradient

use spic_ssdu::data::{build_dataset, NoiseSpec};
use spic_ssdu::losses::{draw, loss_value, loss_value_and_grad, LossConfig, Method, Sample};
use spic_ssdu::net::{init_params, parameter_count, UnrolledConfig, UnrolledNet};
use spic_ssdu::sampling::equidistant_mask;

fn main() -> spic_ssdu::Result<()> {
    let cfg = UnrolledConfig::desk();
    println!("desk network: {} parameters; full-size network: {}", parameter_count(&cfg), parameter_count(&UnrolledConfig::paper()));
    let tiny = UnrolledConfig::tiny();
    let ds = build_dataset(1, 16, 16, 4, NoiseSpec { sigma: 0.003, seed: 1 }, 4)?;
    let omega = equidistant_mask(16, 16, 2, 4)?;
    let sample = Sample::from_slice(&ds.slices[0], &omega)?;
    let params = init_params(&tiny, 3)?;
    let net = UnrolledNet::new(tiny.clone(), params.clone())?;
    for method in Method::ALL {
        let lc = LossConfig::for_method(method);
        let draws = draw(&sample, &lc, 17)?;
        let (b, grad) = loss_value_and_grad(&net, &sample, &draws, &lc)?;
        let i = grad.iter().enumerate().max_by(|a, b| a.1.abs().total_cmp(&b.1.abs())).unwrap().0;
        let h = 1e-5;
        let at = |d: f64| -> spic_ssdu::Result<f64> {
            let mut v = params.values().to_vec();
            v[i] += d;
            let p = spic_ssdu::net::RegularizerParams::from_values(&tiny, v)?;
            Ok(loss_value(&UnrolledNet::new(tiny.clone(), p)?, &sample, &draws, &lc)?.total)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        println!(
            "{method:>10}: loss {:.5} (data {:.5}, secondary {:.5}), d/dθ[{i}] analytic {:.6e} vs fd {:.6e}",
            b.total, b.data_term, b.secondary_term, grad[i], fd
        );
    }
    Ok(())
}
