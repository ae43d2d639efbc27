#![allow(dead_code)]

use cil_core::numerics::{Graph, Rng, Tensor, Var};

/// Central finite-difference gradient of `f` at `params`, step `h`.
pub fn numeric_gradient(params: &[Tensor], h: f64, f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Tensor> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].numel() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let up = f(&work);
            work[p].data_mut()[i] = orig - h;
            let down = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, floor)
pub fn relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-8)
}

/// Builds a graph with `params` as trainable leaves and returns the loss.
pub type Builder<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

pub fn analytic(params: &[Tensor], build: &Builder) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("scalar loss");
    (g.value(loss).data()[0], vars.iter().map(|&v| grads.wrt(v)).collect())
}

pub fn check(params: &[Tensor], build: &Builder) -> f64 {
    let (_, a) = analytic(params, build);
    let n = numeric_gradient(params, 1e-5, &|p| analytic_value(p, build));
    relative_error(&a, &n)
}

fn analytic_value(params: &[Tensor], build: &Builder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).data()[0]
}

pub fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), rng.normal_vec(n, 1.0)).unwrap()
}

/// `sum(x ⊙ R)` for a fixed random `R`, so every output entry matters.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = Rng::new(seed);
    let r = random(&mut rng, g.shape(x));
    let r = g.constant(r);
    let m = g.mul(x, r).unwrap();
    g.sum(m)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn spectral_norm(a: &Tensor) -> f64 {
    let d = a.rows();
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = (0..d).map(|i| (0..d).map(|j| a.get(i, j) * v[j]).sum()).collect();
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        lambda = n;
        v = w.into_iter().map(|x| x / n).collect();
    }
    lambda
}

/// Worst normalized deviation of the sample mean and covariance of
/// `N(mean, L·Lᵀ)` draws: mean error in units of `σ_max/√S`, covariance
/// error in units of `‖Σ‖/√S`.
pub struct SamplingCheck {
    pub mean_units: f64,
    pub cov_units: f64,
}

pub fn gaussian_sampling_check(seed: u64, d: usize, s: usize) -> SamplingCheck {
    use cil_core::numerics::{cholesky, sample_gaussian};
    let mut rng = Rng::new(seed);
    let a = random(&mut rng, &[d, d]);
    let mut sigma = a.matmul(&a.transpose().unwrap()).unwrap();
    for i in 0..d {
        sigma.data_mut()[i * d + i] += 0.1;
    }
    let mean = rng.normal_vec(d, 2.0);
    let lower = cholesky(&sigma, 0.0).unwrap().lower;
    let x = sample_gaussian(&mut rng.derive(1), &mean, &lower, s).unwrap();

    let mut m = vec![0.0; d];
    for i in 0..s {
        m.iter_mut().zip(x.row(i)).for_each(|(a, b)| *a += b / s as f64);
    }
    let sigma_max = (0..d).map(|i| sigma.get(i, i)).fold(0.0, f64::max).sqrt();
    let mean_units = m
        .iter()
        .zip(&mean)
        .map(|(a, b)| (a - b).abs() / (sigma_max / (s as f64).sqrt()))
        .fold(0.0, f64::max);

    let norm = spectral_norm(&sigma);
    let mut cov_units: f64 = 0.0;
    for p in 0..d {
        for q in 0..d {
            let c: f64 = (0..s).map(|i| (x.row(i)[p] - m[p]) * (x.row(i)[q] - m[q])).sum::<f64>() / (s - 1) as f64;
            cov_units = cov_units.max((c - sigma.get(p, q)).abs() / (norm / (s as f64).sqrt()));
        }
    }
    SamplingCheck { mean_units, cov_units }
}

/// A small end-to-end configuration that runs in well under a second.
pub fn tiny_config() -> cil_core::harness::ExperimentConfig {
    use cil_core::backbone::BackboneConfig;
    use cil_core::data::SyntheticSpec;
    use cil_core::harness::ExperimentConfig;

    let mut cfg = ExperimentConfig::default();
    cfg.backbone = BackboneConfig {
        input_dim: 16,
        token_count: 2,
        embed_dim: 8,
        depth: 1,
        mlp_hidden: 16,
        heads: 2,
    };
    cfg.data.synthetic = SyntheticSpec {
        base_classes: 3,
        cil_classes: 6,
        input_dim: 16,
        shared_dim: 6,
        novel_dim: 3,
        train_per_class: 12,
        test_per_class: 5,
        ..SyntheticSpec::default()
    };
    cfg.data.sessions = 3;
    cfg.schedule.epochs_first = 2;
    cfg.schedule.epochs_later = 1;
    cfg.pretrain.epochs_first = 3;
    cfg.probe.epochs_first = 2;
    cfg.alignment.samples_per_class = 20;
    cfg.alignment.epochs = 2;
    cfg.seeds = vec![0, 1];
    cfg
}

pub struct GradCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<dyn Fn(&mut Graph, &[Var]) -> Var>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Graph, &[Var]) -> Var + 'static) -> GradCase {
    GradCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build: Box::new(build),
    }
}

/// One case per differentiable tape operation.
pub fn op_cases() -> Vec<GradCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 5]], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            project(g, y, 1)
        }),
        case("add/sub/mul/scale", &[&[3, 4], &[3, 4], &[3, 4]], |g, v| {
            let a = g.add(v[0], v[1]).unwrap();
            let b = g.sub(a, v[2]).unwrap();
            let c = g.mul(b, v[0]).unwrap();
            let d = g.scale(c, -1.7);
            project(g, d, 2)
        }),
        case("add_row/mul_row", &[&[4, 3], &[3], &[3]], |g, v| {
            let a = g.mul_row(v[0], v[1]).unwrap();
            let b = g.add_row(a, v[2]).unwrap();
            project(g, b, 3)
        }),
        case("relu", &[&[5, 6]], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 4)
        }),
        case("layer_norm", &[&[4, 7]], |g, v| {
            let y = g.layer_norm(v[0]).unwrap();
            project(g, y, 5)
        }),
        case("l2_normalize_rows", &[&[4, 5]], |g, v| {
            let y = g.l2_normalize_rows(v[0]).unwrap();
            project(g, y, 6)
        }),
        case("mean/mean_axis", &[&[4, 5]], |g, v| {
            let a = g.mean_axis(v[0], 0).unwrap();
            let b = g.mean_axis(v[0], 1).unwrap();
            let pa = project(g, a, 7);
            let pb = project(g, b, 8);
            let s = g.add(pa, pb).unwrap();
            let m = g.mean(v[0]);
            g.add(s, m).unwrap()
        }),
        case("mean_tokens", &[&[3 * 5, 4]], |g, v| {
            let y = g.mean_tokens(v[0], 5, 3).unwrap();
            project(g, y, 9)
        }),
        case("concat/select_rows/transpose", &[&[2, 3], &[4, 3], &[4, 2]], |g, v| {
            let rows = g.concat(&[v[0], v[1]], 0).unwrap();
            let picked = g.select_rows(rows, &[5, 0, 2, 2]).unwrap();
            let cols = g.concat(&[picked, v[2]], 1).unwrap();
            let t = g.transpose(cols).unwrap();
            project(g, t, 10)
        }),
        case("softmax_rows", &[&[3, 6]], |g, v| {
            let y = g.softmax_rows(v[0]).unwrap();
            project(g, y, 11)
        }),
        case("cross_entropy", &[&[5, 4]], |g, v| g.cross_entropy(v[0], &[0, 3, 1, 1, 2]).unwrap()),
        // batch 2, tokens 3, heads 2, width 4
        case("attention", &[&[6, 12]], |g, v| {
            let y = g.attention(v[0], 2, 3, 2).unwrap();
            project(g, y, 12)
        }),
        case("append/replace_prompts", &[&[2 * 3, 4], &[2, 4], &[2, 4]], |g, v| {
            let x = g.append_prompts(v[0], v[1], 2, 3).unwrap();
            let sq = g.mul(x, x).unwrap();
            let y = g.replace_prompts(sq, v[2], 2, 3).unwrap();
            project(g, y, 13)
        }),
    ]
}

/// Worst relative error of `case` over `instances` random draws.
pub fn case_error(case: &GradCase, instances: u64) -> f64 {
    (0..instances)
        .map(|seed| {
            let mut rng = Rng::new(1000 + seed);
            let params: Vec<Tensor> = case.shapes.iter().map(|s| random(&mut rng, s)).collect();
            check(&params, &|g, v| (case.build)(g, v))
        })
        .fold(0.0, f64::max)
}

/// Gradient error of the full encoder with respect to an attachment moved
/// off its identity initialization.
pub fn encoder_gradient_error(kind: cil_core::backbone::PetKind, placement: cil_core::backbone::Placement, seed: u64) -> f64 {
    use cil_core::backbone::{encode, BackboneConfig, Bound, FrozenWeights, Pet, PetAttachment, PetConfig};
    use std::sync::Arc;

    let bc = BackboneConfig {
        input_dim: 8,
        token_count: 2,
        embed_dim: 4,
        depth: 2,
        mlp_hidden: 6,
        heads: 2,
    };
    let mut rng = Rng::new(500 + seed);
    let frozen = Arc::new(FrozenWeights::init(bc, &mut rng).unwrap());
    let mut cfg = PetConfig {
        kind,
        prompts: 2,
        ..PetConfig::default()
    };
    cfg.adapter.placement = placement;
    cfg.adapter.bottleneck = Some(2);
    let mut pet = PetAttachment::init(&cfg, &frozen, &mut rng).unwrap();
    for leaf in pet.leaves_mut() {
        for x in leaf.data_mut() {
            *x += 0.3 * rng.normal();
        }
    }
    let inputs = Tensor::matrix(3, 8, rng.normal_vec(24, 1.0)).unwrap();
    let params: Vec<Tensor> = pet.named().into_iter().map(|(_, t)| t.clone()).collect();
    check(&params, &|g, v| {
        let mut it = v.iter().copied();
        let pet_vars = pet.map(|_| it.next().unwrap());
        let weights = match &pet_vars {
            Pet::Full(w) => w.clone(),
            _ => frozen.weights.map(|t| g.constant(t.clone())),
        };
        let bound = Bound { weights, pet: pet_vars };
        let f = encode(g, &bound, &bc, &inputs).unwrap();
        project(g, f, 77)
    })
}

/// Gradient error of the session-local margin loss with respect to
/// features and head rows.
pub fn loss_gradient_error(seed: u64) -> f64 {
    use cil_core::training::{session_loss, CosineHead, HeadKind, LossConfig};

    let mut head = CosineHead::new(HeadKind::Cosine, 4);
    let mut rng = Rng::new(40 + seed);
    for (c, s) in [(0, 0), (1, 1), (2, 1), (3, 1)] {
        head.add_classes(&[c], s, &mut rng).unwrap();
    }
    let cfg = LossConfig {
        loss_scale: 4.0,
        margin: 0.2,
        kd_weight: 0.0,
    };
    let params = vec![random(&mut rng, &[2, 4]), random(&mut rng, &[4, 4])];
    check(&params, &|g, v| session_loss(g, v[0], v[1], &head, &[1, 2, 3], &[3, 1], &cfg).unwrap())
}
