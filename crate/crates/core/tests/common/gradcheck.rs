//! Central finite-difference gradient checking over random configurations.

use amix_core::autodiff::{Graph, Tensor, Var};
use amix_core::models::{CnnSpec, MlpSpec, SplitModel};
use amix_core::regularizers::{Method, MixupConfig, NormKind};
use amix_core::trainer::{pair_loss, NormConfig, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-6;
pub const RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-7;
/// Configurations with a relu/abs input closer than this to zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

/// Builds a scalar loss from leaf variables.
pub type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Builder,
}

#[derive(Debug, Default)]
pub struct Report {
    pub configs: usize,
    pub checked: usize,
    pub failures: Vec<String>,
    pub max_rel: f64,
    pub per_op: std::collections::BTreeMap<String, usize>,
}

fn eval(case: &Case, inputs: &[Tensor<f64>]) -> (f64, f64) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    (g.value(out).item().expect("scalar loss"), g.kink_margin())
}

/// Checks one case; returns `None` when it sits too close to a kink.
pub fn check_case(case: &Case, report: &mut Report) -> Option<()> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars);
    if g.kink_margin() < KINK_MARGIN {
        return None;
    }
    g.backward(out).expect("backward");
    report.configs += 1;
    *report.per_op.entry(case.name.clone()).or_default() += 1;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.into_data()).unwrap_or_else(|| vec![0.0; case.inputs[k].numel()]);
        for e in 0..case.inputs[k].numel() {
            let mut plus = case.inputs.to_vec();
            let mut minus = case.inputs.to_vec();
            let bump = |t: &mut Tensor<f64>, d: f64| {
                let mut data = t.data().to_vec();
                data[e] += d;
                *t = Tensor::new(t.shape().to_vec(), data).unwrap();
            };
            bump(&mut plus[k], STEP);
            bump(&mut minus[k], -STEP);
            let (fp, _) = eval(case, &plus);
            let (fm, _) = eval(case, &minus);
            let numeric = (fp - fm) / (2.0 * STEP);
            let a = analytic[e];
            let abs_err = (a - numeric).abs();
            let rel = abs_err / a.abs().max(numeric.abs()).max(1e-300);
            report.checked += 1;
            if abs_err > ATOL {
                report.max_rel = report.max_rel.max(rel);
            }
            if abs_err > ATOL && rel > RTOL {
                report.failures.push(format!(
                    "{}: input {k} element {e}: analytic {a:e} numeric {numeric:e}",
                    case.name
                ));
            }
        }
    }
    Some(())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights so every
/// element of the output carries a distinct upstream gradient.
fn weighted(g: &mut Graph<f64>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
    let c = g.constant(w);
    let m = g.mul(out, c).unwrap();
    g.sum(m).unwrap()
}

fn case(name: &str, inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// One random configuration of the named operation.
pub fn random_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let ws: u64 = rng.gen();
    let r = rng.gen_range(1..4usize);
    let c = rng.gen_range(1..5usize);
    match op {
        "add" | "sub" | "mul" => {
            // broadcast the second operand along a random axis
            let a = rand_tensor(rng, &[r, c], -2.0, 2.0);
            let b_shape = if rng.gen_bool(0.5) { vec![1, c] } else { vec![r, c] };
            let b = rand_tensor(rng, &b_shape, -2.0, 2.0);
            let op = op.to_string();
            case(&op.clone(), vec![a, b], move |g, v| {
                let o = match op.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }
                .unwrap();
                weighted(g, o, ws)
            })
        }
        "div" => {
            let a = rand_tensor(rng, &[r, c], -2.0, 2.0);
            let mut b = rand_tensor(rng, &[r, c], 0.5, 2.0).into_data();
            for v in &mut b {
                if rng.gen_bool(0.5) {
                    *v = -*v;
                }
            }
            let b = Tensor::new(vec![r, c], b).unwrap();
            case("div", vec![a, b], move |g, v| {
                let o = g.div(v[0], v[1]).unwrap();
                weighted(g, o, ws)
            })
        }
        "relu" | "exp" | "abs" => {
            let a = rand_tensor(rng, &[r, c], -2.0, 2.0);
            let op = op.to_string();
            case(&op.clone(), vec![a], move |g, v| {
                let o = match op.as_str() {
                    "relu" => g.relu(v[0]),
                    "exp" => g.exp(v[0]),
                    _ => g.abs(v[0]),
                }
                .unwrap();
                weighted(g, o, ws)
            })
        }
        "sum" | "mean" => {
            let a = rand_tensor(rng, &[r, c, 2], -2.0, 2.0);
            let axis = rng.gen_range(0..4usize);
            let op = op.to_string();
            case(&op.clone(), vec![a], move |g, v| {
                let o = match (op.as_str(), axis) {
                    ("sum", 3) => g.sum(v[0]),
                    ("sum", ax) => g.sum_axis(v[0], ax),
                    (_, 3) => g.mean(v[0]),
                    (_, ax) => g.mean_axis(v[0], ax),
                }
                .unwrap();
                weighted(g, o, ws)
            })
        }
        "reshape" => {
            let a = rand_tensor(rng, &[r, c, 2], -2.0, 2.0);
            case("reshape", vec![a], move |g, v| {
                let o = g.reshape(v[0], vec![2 * c, r]).unwrap();
                weighted(g, o, ws)
            })
        }
        "matmul" => {
            let k = rng.gen_range(1..5usize);
            let a = rand_tensor(rng, &[r, k], -2.0, 2.0);
            let b = rand_tensor(rng, &[k, c], -2.0, 2.0);
            case("matmul", vec![a, b], move |g, v| {
                let o = g.matmul(v[0], v[1]).unwrap();
                weighted(g, o, ws)
            })
        }
        "conv2d" => {
            let b = rng.gen_range(1..3usize);
            let cin = rng.gen_range(1..3usize);
            let cout = rng.gen_range(1..3usize);
            let k = rng.gen_range(1..4usize);
            let stride = rng.gen_range(1..3usize);
            let padding = rng.gen_range(0..2usize);
            let hw = rng.gen_range(k.max(3)..6usize);
            let x = rand_tensor(rng, &[b, cin, hw, hw], -1.0, 1.0);
            let w = rand_tensor(rng, &[cout, cin, k, k], -1.0, 1.0);
            case("conv2d", vec![x, w], move |g, v| {
                let o = g.conv2d(v[0], v[1], stride, padding).unwrap();
                weighted(g, o, ws)
            })
        }
        "adaptive_avg_pool" => {
            let x = rand_tensor(rng, &[r, c, 3, 2], -1.0, 1.0);
            case("adaptive_avg_pool", vec![x], move |g, v| {
                let o = g.adaptive_avg_pool(v[0]).unwrap();
                weighted(g, o, ws)
            })
        }
        "index_select" => {
            let x = rand_tensor(rng, &[r + 1, c], -1.0, 1.0);
            let idx: Vec<usize> = (0..rng.gen_range(1..5usize)).map(|_| rng.gen_range(0..r + 1)).collect();
            case("index_select", vec![x], move |g, v| {
                let o = g.index_select(v[0], idx.clone()).unwrap();
                weighted(g, o, ws)
            })
        }
        "anchored_loss_mlp" | "anchored_loss_cnn" => anchored_case(op, rng),
        other => panic!("unknown op {other}"),
    }
}

/// Full training loss (two batch ERMs plus the anchored penalty and an
/// optional norm penalty) as a function of every model parameter.
fn anchored_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let batch = rng.gen_range(2..5usize);
    let model = if op == "anchored_loss_mlp" {
        SplitModel::<f64>::build_mlp(
            &MlpSpec {
                input_dim: 3,
                hidden: vec![rng.gen_range(2..5usize)],
                z_dim: rng.gen_range(1..4usize),
            },
            rng,
        )
        .unwrap()
    } else {
        SplitModel::<f64>::build_small_cnn(
            &CnnSpec {
                input_size: 5,
                channels: vec![2, 3],
                z_dim: 2,
                ..CnnSpec::default()
            },
            rng,
        )
        .unwrap()
    };
    let mut in_shape = vec![batch];
    in_shape.extend(model.spec().input_shape());
    let xi = rand_tensor(rng, &in_shape, 0.0, 1.0);
    let xj = rand_tensor(rng, &in_shape, 0.0, 1.0);
    let yi: Vec<f64> = (0..batch).map(|_| rng.gen_range(0.0..5.0)).collect();
    let yj: Vec<f64> = (0..batch).map(|_| rng.gen_range(0.0..5.0)).collect();
    let mixup = MixupConfig {
        method: Method::AnchoredRegressionMixup,
        beta: rng.gen_range(0.5..3.0),
        lambda: rng.gen_range(0.05..1.0),
        ..MixupConfig::default()
    };
    let train = TrainConfig {
        norm: rng.gen_bool(0.3).then_some(NormConfig {
            kind: NormKind::Ridge,
            lambda: 1e-2,
        }),
        ..TrainConfig::default()
    };
    let params = model.params().to_vec();
    case(op, params, move |g, v| {
        let mut m = model.clone();
        m.set_params(v.iter().map(|&p| g.value(p).clone()).collect()).unwrap();
        let bound = amix_core::models::BoundParams { vars: v.to_vec() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        pair_loss(g, &m, &bound, (xi.clone(), &yi), (xj.clone(), &yj), &mixup, &train, &mut rng)
            .unwrap()
            .loss
    })
}

pub const OPS: [&str; 16] = [
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "exp",
    "abs",
    "sum",
    "mean",
    "reshape",
    "matmul",
    "conv2d",
    "adaptive_avg_pool",
    "index_select",
    "anchored_loss_mlp",
    "anchored_loss_cnn",
];

/// Checks `per_op` accepted configurations of every entry of [`OPS`].
pub fn run_suite(per_op: usize, seed: u64) -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = Report::default();
    for op in OPS {
        let mut accepted = 0;
        let mut attempts = 0;
        while accepted < per_op {
            attempts += 1;
            assert!(attempts < per_op * 50, "{op}: could not draw configurations away from kinks");
            let c = random_case(op, &mut rng);
            if check_case(&c, &mut report).is_some() {
                accepted += 1;
            }
        }
    }
    report
}
