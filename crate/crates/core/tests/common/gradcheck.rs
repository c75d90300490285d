//! Finite-difference gradient oracle.
//!
//! The loss is re-evaluated by an independent, naive train-mode forward pass
//! in double-double arithmetic, so a tiny stencil step can be used without
//! the difference being swamped by f64 rounding. Only the analytic side comes
//! from the library.

use dcn::autoenc::{network_specs, Activation, ArchOptions, AutoencoderParams, Mode, Objective, BN_EPSILON};
use dcn::optim::ParamArrays;
use dcn::Matrix;
use rand::Rng;
use twofloat::TwoFloat as D;

fn d(v: f64) -> D {
    D::from_f64(v)
}

/// Quotient refined by two correction steps; the crate's own division is
/// only accurate to about f64 precision.
fn div(a: D, b: D) -> D {
    let mut q = d(a.hi() / b.hi());
    for _ in 0..2 {
        let r = a - q * b;
        q += d(r.hi() / b.hi());
    }
    q
}

struct RefLayer {
    in_dim: usize,
    out_dim: usize,
    relu: bool,
    bn: bool,
    /// weight (out x in, row-major), bias, then gamma and beta if `bn`
    arrays: Vec<Vec<D>>,
}

fn reference_layers(p: &AutoencoderParams) -> Vec<RefLayer> {
    p.layers()
        .map(|l| {
            let conv = |xs: &[f64]| xs.iter().map(|v| d(*v)).collect::<Vec<D>>();
            let mut arrays = vec![conv(l.weight.as_slice()), conv(&l.bias)];
            if l.spec.batch_norm {
                arrays.push(conv(&l.gamma));
                arrays.push(conv(&l.beta));
            }
            RefLayer {
                in_dim: l.spec.in_dim,
                out_dim: l.spec.out_dim,
                relu: l.spec.activation == Activation::Relu,
                bn: l.spec.batch_norm,
                arrays,
            }
        })
        .collect()
}

fn layer_forward(l: &RefLayer, input: &[Vec<D>]) -> Vec<Vec<D>> {
    let (w, b) = (&l.arrays[0], &l.arrays[1]);
    let mut z: Vec<Vec<D>> = input
        .iter()
        .map(|row| {
            (0..l.out_dim)
                .map(|o| {
                    let mut a = b[o];
                    for k in 0..l.in_dim {
                        a += w[o * l.in_dim + k] * row[k];
                    }
                    a
                })
                .collect()
        })
        .collect();
    if l.bn {
        let n = d(z.len() as f64);
        for j in 0..l.out_dim {
            let mut mean = d(0.0);
            for r in &z {
                mean += r[j];
            }
            mean = div(mean, n);
            let mut var = d(0.0);
            for r in &z {
                var += (r[j] - mean) * (r[j] - mean);
            }
            var = div(var, n);
            let sd = (var + d(BN_EPSILON)).sqrt();
            for r in z.iter_mut() {
                r[j] = l.arrays[2][j] * div(r[j] - mean, sd) + l.arrays[3][j];
            }
        }
    }
    if l.relu {
        for r in z.iter_mut() {
            for v in r.iter_mut() {
                if !(*v > d(0.0)) {
                    *v = d(0.0);
                }
            }
        }
    }
    z
}

fn to_rows(m: &Matrix) -> Vec<Vec<D>> {
    m.row_iter().map(|r| r.iter().map(|v| d(*v)).collect()).collect()
}

struct Reference {
    layers: Vec<RefLayer>,
    encoder_len: usize,
    x: Vec<Vec<D>>,
    m: Vec<Vec<D>>,
    objective: Objective,
    /// inputs of every layer for the unperturbed parameters
    inputs: Vec<Vec<Vec<D>>>,
}

impl Reference {
    fn new(p: &AutoencoderParams, x: &Matrix, m: &Matrix, objective: Objective) -> Self {
        let mut r = Self {
            layers: reference_layers(p),
            encoder_len: p.depth(),
            x: to_rows(x),
            m: to_rows(m),
            objective,
            inputs: Vec::new(),
        };
        let mut h = r.x.clone();
        for l in &r.layers {
            r.inputs.push(h.clone());
            h = layer_forward(l, &h);
        }
        r
    }

    /// Loss with the layers from `start` on recomputed.
    fn loss_from(&self, start: usize) -> D {
        let mut h = self.inputs[start].clone();
        let mut latent = None;
        if start >= self.encoder_len {
            latent = Some(self.inputs[self.encoder_len].clone());
        }
        for (i, l) in self.layers.iter().enumerate().skip(start) {
            h = layer_forward(l, &h);
            if i + 1 == self.encoder_len {
                latent = Some(h.clone());
            }
        }
        let latent = latent.expect("latent computed");
        let mut recon = d(0.0);
        for (y, t) in h.iter().zip(&self.x) {
            for (a, b) in y.iter().zip(t) {
                recon += (*a - *b) * (*a - *b);
            }
        }
        let mut clust = d(0.0);
        for (hr, mr) in latent.iter().zip(&self.m) {
            for (a, b) in hr.iter().zip(mr) {
                clust += (*a - *b) * (*a - *b);
            }
        }
        let mut total = d(0.5 * self.objective.lambda) * clust;
        if self.objective.reconstruction {
            total += recon;
        }
        total
    }

    /// Five-point central difference for entry `k` of array `a` of layer `l`.
    fn derivative(&mut self, l: usize, a: usize, k: usize, step: f64) -> f64 {
        let orig = self.layers[l].arrays[a][k];
        let at = |delta: f64, this: &mut Self| {
            this.layers[l].arrays[a][k] = orig + d(delta);
            this.loss_from(l)
        };
        let p1 = at(step, self);
        let m1 = at(-step, self);
        let p2 = at(2.0 * step, self);
        let m2 = at(-2.0 * step, self);
        self.layers[l].arrays[a][k] = orig;
        let g = div(d(8.0) * (p1 - m1) - (p2 - m2), d(12.0 * step));
        g.hi()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over the
    /// entries compared.
    pub worst: f64,
    /// Entries whose gradient magnitude exceeded the threshold.
    pub compared: usize,
    pub entries: usize,
}

pub const STEP: f64 = 1e-7;
pub const MAGNITUDE_THRESHOLD: f64 = 1e-8;

pub fn check(p: &AutoencoderParams, x: &Matrix, m: &Matrix, objective: Objective) -> GradCheck {
    let trace = p.forward(x, Mode::Train).expect("forward");
    let analytic = p.backward(&trace, x, Some(m), objective).expect("backward");
    let analytic = analytic.arrays();
    let mut reference = Reference::new(p, x, m, objective);
    let mut out = GradCheck {
        worst: 0.0,
        compared: 0,
        entries: 0,
    };
    let mut flat = 0;
    for l in 0..reference.layers.len() {
        for a in 0..reference.layers[l].arrays.len() {
            for k in 0..reference.layers[l].arrays[a].len() {
                let ga = analytic[flat][k];
                let gn = reference.derivative(l, a, k, STEP);
                out.entries += 1;
                let scale = ga.abs().max(gn.abs());
                if scale > MAGNITUDE_THRESHOLD {
                    out.compared += 1;
                    out.worst = out.worst.max((ga - gn).abs() / scale);
                }
            }
            flat += 1;
        }
    }
    out
}

pub struct Case {
    pub params: AutoencoderParams,
    pub x: Matrix,
    pub m: Matrix,
    pub objective: Objective,
}

/// A random network of depth `1..=max_depth` with widths `1..=max_width`,
/// randomized biases and batch-norm parameters, a random batch and random
/// assigned centroids.
pub fn random_case(rng: &mut impl Rng, max_depth: usize, max_width: usize, lambda: f64, batch: usize) -> Case {
    let depth = rng.random_range(1..=max_depth);
    let input = rng.random_range(1..=max_width);
    let widths: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=max_width)).collect();
    let opts = ArchOptions {
        linear_bottleneck: rng.random_bool(0.5),
        relu_output: rng.random_bool(0.25),
    };
    let (e, dspec) = network_specs(input, &widths, opts).expect("specs");
    let mut params = AutoencoderParams::init(&e, &dspec, rng).expect("init");
    for l in params.encoder.iter_mut().chain(params.decoder.iter_mut()) {
        l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        l.gamma.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
        l.beta.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
    }
    let x = Matrix::from_fn(batch, input, |_, _| rng.random_range(-1.0..1.0));
    let m = Matrix::from_fn(batch, params.latent_dim(), |_, _| rng.random_range(-1.0..1.0));
    Case {
        params,
        x,
        m,
        objective: Objective::joint(lambda).expect("lambda"),
    }
}
