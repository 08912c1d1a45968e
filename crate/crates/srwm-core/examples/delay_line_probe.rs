// Scratch probe: can one SRWM layer learn to output the previous token?
// Trains y_t to regress x_{t-1} with a plain Adam loop on W_0.
// Not part of the deliverable surface.
use srwm_core::fwp::{srwm_backward, srwm_forward, InputActivation, LrMode, SrwmConfig, SrwmParams};
use srwm_core::numerics::{Matrix, Real, Rng};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let steps: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(4000);
    let soft_in: bool = args.get(1).map(|s| s == "softmax").unwrap_or(false);
    let heads: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let lr: Real = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let d_in = 16usize;
    let cfg = SrwmConfig {
        d_in,
        d_out: d_in,
        num_heads: heads,
        lr_mode: LrMode::PerSubmatrix4,
        input_activation: if soft_in { InputActivation::Softmax } else { InputActivation::Identity },
    };
    let rows = cfg.rows_per_head();
    let hd = cfg.head_in();
    let mut rng = Rng::new(7, 0);
    let mut params = SrwmParams::init(&cfg, &mut rng);

    let n_param: usize = heads * rows * hd;
    let mut m = vec![0.0 as Real; n_param];
    let mut v = vec![0.0 as Real; n_param];
    let t_len = 12usize;
    let batch = 16usize;

    for step in 1..=steps {
        let mut grad: Vec<Matrix> = (0..heads).map(|_| Matrix::zeros(rows, hd)).collect();
        let mut loss_sum = 0.0;
        for b in 0..batch {
            let mut data_rng = Rng::new(1000 + step as u64, b as u64);
            let xs: Vec<Vec<Real>> = (0..t_len).map(|_| data_rng.normal_vec(d_in, 1.0)).collect();
            let out = srwm_forward(&cfg, &params, &xs, None, false).unwrap();
            // L = mean_t>=1 ||y_t - x_{t-1}||^2
            let mut grad_ys = vec![vec![0.0; d_in]; t_len];
            for t in 1..t_len {
                for i in 0..d_in {
                    let diff = out.ys[t][i] - xs[t - 1][i];
                    loss_sum += diff * diff;
                    grad_ys[t][i] = 2.0 * diff;
                }
            }
            let back = srwm_backward(&cfg, &out.trace, &grad_ys, None).unwrap();
            for (g, gh) in grad.iter_mut().zip(back.grad_w0.iter()) {
                g.add_assign(gh);
            }
        }
        let norm = 1.0 / (batch * (t_len - 1) * d_in) as Real;
        // Adam over the flattened heads.
        let mut idx = 0usize;
        let bc1 = 1.0 - (0.9 as Real).powi(step as i32);
        let bc2 = 1.0 - (0.999 as Real).powi(step as i32);
        for (h, g) in grad.iter().enumerate() {
            let pw = params.w0[h].data_mut();
            for (p, gv) in pw.iter_mut().zip(g.data().iter()) {
                let gs = gv * norm;
                m[idx] = 0.9 * m[idx] + 0.1 * gs;
                v[idx] = 0.999 * v[idx] + 0.001 * gs * gs;
                *p -= lr * (m[idx] / bc1) / ((v[idx] / bc2).sqrt() + 1e-8);
                idx += 1;
            }
        }
        if step % 500 == 0 {
            // Baseline: predicting zero gives E||x||^2 = d_in.
            let mse = loss_sum / (batch * (t_len - 1) * d_in) as Real;
            println!("step {step:5}: per-dim mse {mse:.4} (predict-zero baseline 1.0)");
        }
    }
}
