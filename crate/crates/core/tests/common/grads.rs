//! Finite-difference checks of every tape operation and of each component
//! loss on toy dimensions (vocabulary 10, hidden 6).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skelstory::autodiff::{Tape, Var};
use skelstory::gradcheck::{check_inputs, check_params, GradReport};
use skelstory::models::{
    Extractor, InputToSkeleton, ModelDims, Skeleton, SkeletonToSentence, Source, StoryContext,
};
use skelstory::tensor::{Result, Tensor};
use skelstory::trainer::{
    policy_gradient_step, ComponentOptimizer, RewardBaseline, TrainingConfig,
};

/// Maximum relative error accepted for any coordinate.
pub const TOL: f64 = 1e-4;

pub type Named = (&'static str, GradReport);

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.5..2.0)).collect(),
    )
    .unwrap()
}

/// Reduces any output to a scalar through a fixed weighting so that every
/// output coordinate contributes a distinct gradient.
fn project(t: &mut Tape, out: Var) -> Result<Var> {
    let n = t.value(out).len();
    let shape = t.shape(out).to_vec();
    let weights: Vec<f64> = (0..n)
        .map(|i| 0.3 + 0.17 * ((i * 7 + 3) % 11) as f64)
        .collect();
    let w = t.constant(if shape.is_empty() {
        Tensor::scalar(weights[0])
    } else {
        Tensor::new(shape, weights).unwrap()
    });
    let m = t.mul(out, w)?;
    t.sum(m)
}

fn op(
    out: &mut Vec<Named>,
    name: &'static str,
    inputs: Vec<Tensor>,
    f: impl for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
) {
    let r = check_inputs(&inputs, |t, v| {
        let y = f(t, v)?;
        project(t, y)
    })
    .unwrap();
    out.push((name, r));
}

/// One report per differentiable tape operation (and broadcast variant).
pub fn op_reports(seed: u64) -> Vec<Named> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let m = |rng: &mut ChaCha8Rng| rand_tensor(&[3, 4], rng);
    let row = |rng: &mut ChaCha8Rng| rand_tensor(&[4], rng);
    op(&mut out, "add", vec![m(&mut rng), m(&mut rng)], |t, v| {
        t.add(v[0], v[1])
    });
    op(&mut out, "sub", vec![m(&mut rng), m(&mut rng)], |t, v| {
        t.sub(v[0], v[1])
    });
    op(&mut out, "mul", vec![m(&mut rng), m(&mut rng)], |t, v| {
        t.mul(v[0], v[1])
    });
    op(
        &mut out,
        "add (row broadcast)",
        vec![m(&mut rng), row(&mut rng)],
        |t, v| t.add(v[0], v[1]),
    );
    op(
        &mut out,
        "sub (left row broadcast)",
        vec![row(&mut rng), m(&mut rng)],
        |t, v| t.sub(v[0], v[1]),
    );
    op(
        &mut out,
        "mul (row broadcast)",
        vec![m(&mut rng), row(&mut rng)],
        |t, v| t.mul(v[0], v[1]),
    );
    op(&mut out, "tanh", vec![m(&mut rng)], |t, v| t.tanh(v[0]));
    op(&mut out, "sigmoid", vec![m(&mut rng)], |t, v| {
        t.sigmoid(v[0])
    });
    op(&mut out, "exp", vec![m(&mut rng)], |t, v| t.exp(v[0]));
    op(
        &mut out,
        "log",
        vec![positive(&[3, 4], &mut rng)],
        |t, v| t.log(v[0]),
    );
    op(&mut out, "scale", vec![m(&mut rng)], |t, v| {
        t.scale(v[0], -1.7)
    });
    let b = rand_tensor(&[4, 2], &mut rng);
    op(&mut out, "matmul", vec![m(&mut rng), b], |t, v| {
        t.matmul(v[0], v[1])
    });
    op(
        &mut out,
        "matmul (row vector)",
        vec![rand_tensor(&[3], &mut rng), m(&mut rng)],
        |t, v| t.matmul(v[0], v[1]),
    );
    op(
        &mut out,
        "matmul (column vector)",
        vec![m(&mut rng), row(&mut rng)],
        |t, v| t.matmul(v[0], v[1]),
    );
    op(
        &mut out,
        "log_softmax",
        vec![rand_tensor(&[5], &mut rng)],
        |t, v| t.log_softmax(v[0]),
    );
    op(
        &mut out,
        "log_softmax (rows)",
        vec![rand_tensor(&[3, 5], &mut rng)],
        |t, v| t.log_softmax(v[0]),
    );
    op(
        &mut out,
        "nll_loss",
        vec![rand_tensor(&[3, 5], &mut rng)],
        |t, v| {
            let lp = t.log_softmax(v[0])?;
            t.nll_loss(lp, &[4, 0, 2])
        },
    );
    op(
        &mut out,
        "sum",
        vec![rand_tensor(&[2, 3], &mut rng)],
        |t, v| t.sum(v[0]),
    );
    op(
        &mut out,
        "mean",
        vec![rand_tensor(&[2, 3], &mut rng)],
        |t, v| t.mean(v[0]),
    );
    op(
        &mut out,
        "concat",
        vec![rand_tensor(&[3], &mut rng), rand_tensor(&[2], &mut rng)],
        |t, v| t.concat(&[v[0], v[1], v[0]]),
    );
    op(
        &mut out,
        "slice",
        vec![rand_tensor(&[6], &mut rng)],
        |t, v| t.slice(v[0], 2, 3),
    );
    op(
        &mut out,
        "gather",
        vec![rand_tensor(&[4, 3], &mut rng)],
        |t, v| {
            let a = t.gather(v[0], 2)?;
            let b = t.gather(v[0], 2)?;
            let c = t.gather(v[0], 0)?;
            t.stack(&[a, b, c])
        },
    );
    op(
        &mut out,
        "stack",
        vec![rand_tensor(&[3], &mut rng), rand_tensor(&[3], &mut rng)],
        |t, v| t.stack(&[v[0], v[1], v[0]]),
    );
    op(
        &mut out,
        "pick",
        vec![rand_tensor(&[2, 3], &mut rng)],
        |t, v| {
            let a = t.pick(v[0], 4)?;
            let b = t.pick(v[0], 1)?;
            t.mul(a, b)
        },
    );
    op(
        &mut out,
        "gated cell (shared nodes)",
        vec![
            rand_tensor(&[4], &mut rng),
            rand_tensor(&[4, 8], &mut rng),
            rand_tensor(&[8], &mut rng),
        ],
        |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let z = t.add(z, v[2])?;
            let i = t.slice(z, 0, 4)?;
            let g = t.slice(z, 4, 4)?;
            let i = t.sigmoid(i)?;
            let g = t.tanh(g)?;
            let c = t.mul(i, g)?;
            let h = t.tanh(c)?;
            t.mul(h, v[0])
        },
    );
    out
}

pub fn dims() -> ModelDims {
    ModelDims {
        vocab: 10,
        embedding: 4,
        hidden: 6,
    }
}

/// Reports for the three component losses and the policy-gradient
/// surrogate, over every parameter coordinate.
pub fn component_reports(seed: u64) -> Vec<Named> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let e = Extractor::new(dims(), 0.3, &mut rng);
    let (x, s) = ([5, 6, 7, 8], [6, 8]);
    let (_, grads) = e.model().loss_and_grads(Source::Sequence(&x), &s).unwrap();
    let r = check_params(e.params(), &grads, |p| {
        Extractor::from_params(p.clone())
            .unwrap()
            .extractor_loss(&x, &s)
            .unwrap()
    });
    out.push(("extractor loss", r));

    let q = InputToSkeleton::new(dims(), 0.3, &mut rng);
    let ctx = StoryContext::new(vec![vec![5, 6, 7], vec![8, 9], vec![5]]).unwrap();
    let sk = Skeleton::new(vec![9, 5]);
    let (_, grads) = q
        .model()
        .loss_and_grads(Source::Context(ctx.sentences()), &sk.tokens)
        .unwrap();
    let r = check_params(q.params(), &grads, |p| {
        InputToSkeleton::from_params(p.clone())
            .unwrap()
            .i2s_loss(&ctx, &sk)
            .unwrap()
    });
    out.push(("input-to-skeleton loss", r));

    let d = SkeletonToSentence::new(dims(), 0.3, &mut rng);
    let sk = Skeleton::new(vec![6, 9]);
    let y = [5, 6, 7, 9, 8];
    let (_, grads) = d
        .model()
        .loss_and_grads(Source::Sequence(&sk.tokens), &y)
        .unwrap();
    let r = check_params(d.params(), &grads, |p| {
        SkeletonToSentence::from_params(p.clone())
            .unwrap()
            .s2s_loss(&sk, &y)
            .unwrap()
    });
    out.push(("skeleton-to-sentence loss", r));

    let mut e = Extractor::new(dims(), 0.3, &mut rng);
    let before = e.clone();
    let inputs = vec![vec![5, 6, 7], vec![8, 9, 5, 6]];
    let skeletons = vec![Skeleton::new(vec![6]), Skeleton::new(vec![9, 6])];
    let rewards = [0.7, -0.4];
    let cfg = TrainingConfig::default();
    let mut opt = ComponentOptimizer::new(e.params(), &cfg);
    let grads = policy_gradient_step(
        &mut e,
        &mut opt,
        &inputs,
        &skeletons,
        &rewards,
        &mut RewardBaseline::new(false, 0.9),
    )
    .unwrap();
    let r = check_params(before.params(), &grads, |p| {
        let m = Extractor::from_params(p.clone()).unwrap();
        let total: f64 = inputs
            .iter()
            .zip(&skeletons)
            .zip(rewards)
            .map(|((x, s), a)| a * m.skeleton_log_prob(x, s).unwrap())
            .sum();
        -total / inputs.len() as f64
    });
    out.push(("policy-gradient surrogate", r));
    out
}
