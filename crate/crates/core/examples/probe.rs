use pansearch_core::deform_unet::*;
use pansearch_core::tensor_nn::Tensor;

fn hash_input(side: usize, salt: u64) -> Tensor<f64> {
    Tensor::from_vec(
        &[1, 1, side, side],
        (0..(side * side) as u64).map(|i| {
            let mut h = (i + salt).wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(0xD1B54A32D192ED03);
            h ^= h >> 29; h = h.wrapping_mul(0xBF58476D1CE4E5B9); h ^= h >> 32;
            (h % 10_000) as f64 / 10_000.0
        }).collect(),
    ).unwrap()
}

fn nudge(model: &mut SegModel<f64>) {
    for (k, p) in model.params_mut().into_iter().enumerate() {
        let shape = p.value.shape().to_vec();
        if shape.len() == 1 {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = 0.06 + 0.035 * (((k * 7 + i * 3) % 11) as f64 - 5.0) / 5.0;
            }
        } else if shape[0] == 18 && shape.len() == 4 {
            for (i, v) in p.value.data_mut().iter_mut().enumerate() {
                *v = 0.0;
            }
        }
    }
}

fn main() {
    let side = 8usize;
    for seed in 0..20u64 {
        let ucfg = UNetConfig { depth: 2, base_channels: 2, deformable_encoder: true, input_side: side, seed };
        let mut model = build::<f64>(&ucfg).unwrap();
        nudge(&mut model);
        let x = hash_input(side, 3);
        let n_out = side * side;
        let lw: Vec<f64> = (0..n_out).map(|i| if (i * 29 + 5) % 7 % 2 == 0 { 1.0 } else { -1.0 }).collect();

        let (out, cache) = model.forward_cached(&x).unwrap();
        let grad_out = Tensor::from_vec(out.shape(), lw.clone()).unwrap();
        model.zero_grad();
        let gx = model.backward(&cache, &grad_out).unwrap();
        let mut analytic: Vec<Tensor<f64>> = model.params_mut().iter().map(|p| p.grad.clone()).collect();
        analytic.push(gx);
        let mut values: Vec<Tensor<f64>> = model.params_mut().iter().map(|p| p.value.clone()).collect();
        values.push(x.clone());
        let n_params = values.len() - 1;

        let h = 1e-6;
        let base_out: Vec<f64> = out.data().to_vec();
        let mut max_rel = 0.0f64;
        let mut min_abs_grad = f64::INFINITY;
        let mut worst = (0usize, 0usize, 0.0f64, 0.0f64);
        let mut max_abs_small = 0.0f64;
        for k in 0..values.len() {
            for ci in 0..values[k].len() {
                let orig = values[k].data()[ci];
                let eval = |v: f64, vals: &mut Vec<Tensor<f64>>| -> f64 {
                    vals[k].data_mut()[ci] = v;
                    let mut m = build::<f64>(&ucfg).unwrap();
                    for (p, t) in m.params_mut().into_iter().zip(&vals[..n_params]) { p.value = t.clone(); }
                    let o = m.forward(&vals[n_params]).unwrap();
                    o.data().iter().zip(&base_out).zip(&lw).map(|((a, b), w)| (a - b) * w).sum()
                };
                let mut vals = values.clone();
                let plus = eval(orig + h, &mut vals);
                let minus = eval(orig - h, &mut vals);
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic[k].data()[ci];
                min_abs_grad = min_abs_grad.min(a.abs().max(numeric.abs()));
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
                if a.abs() + numeric.abs() >= 1e-3 {
                    if rel > max_rel { max_rel = rel; worst = (k, ci, a, numeric); }
                } else {
                    let abs = (a - numeric).abs();
                    if abs > max_abs_small { max_abs_small = abs; }
                }
            }
        }
        println!("seed {seed}: resolvable max rel {max_rel:.3e} (k={} a={:.3e} n={:.3e}), small-coord max abs {max_abs_small:.3e}",
                 worst.0, worst.2, worst.3, max_abs_small = max_abs_small);
    }
}
