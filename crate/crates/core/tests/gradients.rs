//! Engine forward values and gradients against the f64 reference layers,
//! with gradients checked by central differences on the reference.

use nvcim_oracle as oracle;
use nvcim_tsb::autodiff::{BnMode, BnRunningStats, Graph, Var};
use nvcim_tsb::tsb::apply_in_graph;
use nvcim_tsb::Tensor;
use proptest::prelude::*;

const FD_STEP: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const VALUE_TOL: f64 = 1e-4;

struct Checked {
    output: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

/// Builds `sum(r * f(inputs))` on the tape and returns the forward value of
/// `f` and the gradient of every input.
fn engine(
    inputs: &[(Vec<usize>, Vec<f64>)],
    r: &[f64],
    f: impl FnOnce(&mut Graph, &[Var]) -> Var,
) -> Checked {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.param(Tensor::new(s.clone(), d.iter().map(|&x| x as f32).collect()).unwrap()))
        .collect();
    let y = f(&mut g, &vars);
    let shape = g.value(y).shape().to_vec();
    let rv = g.input(Tensor::new(shape, r.iter().map(|&x| x as f32).collect()).unwrap());
    let p = g.mul(y, rv).unwrap();
    let loss = g.sum(p);
    let output = g.value(y).data().iter().map(|&x| x as f64).collect();
    g.backward(loss).unwrap();
    let grads = vars
        .iter()
        .map(|&v| g.grad(v).unwrap().data().iter().map(|&x| x as f64).collect())
        .collect();
    Checked { output, grads }
}

/// f32-representable values so both routes see the same inputs.
fn values(rng: &mut oracle::Lcg, n: usize) -> Vec<f64> {
    rng.vec(n).into_iter().map(|x| x as f32 as f64).collect()
}

/// Checks the forward value and the gradient of each input against the oracle.
fn check(
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    rng: &mut oracle::Lcg,
    reference: impl Fn(&[Vec<f64>]) -> Vec<f64>,
    f: impl FnOnce(&mut Graph, &[Var]) -> Var,
) -> Result<(), TestCaseError> {
    let datas: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let y_ref = reference(&datas);
    let r = values(rng, y_ref.len());
    let got = engine(&inputs, &r, f);
    let err = oracle::relative_error(&got.output, &y_ref, 1e-6);
    prop_assert!(err < VALUE_TOL, "forward error {err}");
    for (i, grad) in got.grads.iter().enumerate() {
        let fd = oracle::central_difference(
            |x| {
                let mut args = datas.clone();
                args[i] = x.to_vec();
                oracle::project(&reference(&args), &r)
            },
            &datas[i],
            FD_STEP,
        );
        let err = oracle::relative_error(grad, &fd, 1e-6);
        prop_assert!(err < GRAD_TOL, "input {i}: gradient error {err}");
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv2d_matches_reference(
        seed in any::<u64>(),
        n in 1usize..3, c in 1usize..4, o in 1usize..4,
        hw in 3usize..7, k in 1usize..4, stride in 1usize..3, pad in 0usize..3,
    ) {
        prop_assume!(hw + 2 * pad >= k);
        let mut rng = oracle::Lcg::new(seed);
        let xs = [n, c, hw, hw];
        let ks = [o, c, k, k];
        let inputs = vec![
            (xs.to_vec(), values(&mut rng, n * c * hw * hw)),
            (ks.to_vec(), values(&mut rng, o * c * k * k)),
        ];
        check(
            inputs,
            &mut rng,
            |a| oracle::conv2d(&a[0], xs, &a[1], ks, stride, pad).0,
            |g, v| g.conv2d(v[0], v[1], stride, pad).unwrap(),
        )?;
    }

    #[test]
    fn linear_matches_reference(seed in any::<u64>(), n in 1usize..5, f in 1usize..9, o in 1usize..6) {
        let mut rng = oracle::Lcg::new(seed);
        let inputs = vec![
            (vec![n, f], values(&mut rng, n * f)),
            (vec![o, f], values(&mut rng, o * f)),
            (vec![o], values(&mut rng, o)),
        ];
        check(
            inputs,
            &mut rng,
            |a| oracle::linear(&a[0], n, f, &a[1], o, Some(&a[2])),
            |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap(),
        )?;
    }

    #[test]
    fn batchnorm_train_matches_reference(seed in any::<u64>(), n in 2usize..4, c in 1usize..4, hw in 1usize..4) {
        // two samples per channel normalize to ±1 whatever x is: the gradient vanishes
        prop_assume!(n * hw * hw >= 4);
        let mut rng = oracle::Lcg::new(seed);
        let xs = [n, c, hw, hw];
        let inputs = vec![
            (xs.to_vec(), values(&mut rng, n * c * hw * hw)),
            (vec![c], values(&mut rng, c)),
            (vec![c], values(&mut rng, c)),
        ];
        let mut stats = BnRunningStats::new(c);
        check(
            inputs,
            &mut rng,
            |a| oracle::batchnorm_train(&a[0], xs, &a[1], &a[2], nvcim_tsb::autodiff::BN_EPS as f64),
            |g, v| g.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Train).unwrap(),
        )?;
    }

    #[test]
    fn batchnorm_eval_matches_reference(seed in any::<u64>(), n in 1usize..3, c in 1usize..4, hw in 1usize..4) {
        let mut rng = oracle::Lcg::new(seed);
        let xs = [n, c, hw, hw];
        let mean: Vec<f64> = values(&mut rng, c);
        let var: Vec<f64> = values(&mut rng, c).iter().map(|v| (1.5 + v) as f32 as f64).collect();
        let mut stats = BnRunningStats {
            mean: mean.iter().map(|&x| x as f32).collect(),
            var: var.iter().map(|&x| x as f32).collect(),
        };
        let inputs = vec![
            (xs.to_vec(), values(&mut rng, n * c * hw * hw)),
            (vec![c], values(&mut rng, c)),
            (vec![c], values(&mut rng, c)),
        ];
        check(
            inputs,
            &mut rng,
            |a| oracle::batchnorm_eval(&a[0], xs, &a[1], &a[2], &mean, &var, nvcim_tsb::autodiff::BN_EPS as f64),
            |g, v| g.batchnorm2d(v[0], v[1], v[2], &mut stats, BnMode::Eval).unwrap(),
        )?;
    }

    #[test]
    fn relu_matches_reference(seed in any::<u64>(), len in 1usize..40) {
        let mut rng = oracle::Lcg::new(seed);
        // keep away from the kink
        let x: Vec<f64> = values(&mut rng, len)
            .into_iter()
            .map(|v| if v.abs() < 1e-3 { 0.5 } else { v })
            .collect();
        check(vec![(vec![len], x)], &mut rng, |a| oracle::relu(&a[0]), |g, v| g.relu(v[0]))?;
    }

    #[test]
    fn pools_match_reference(seed in any::<u64>(), n in 1usize..3, c in 1usize..3, hw in 2usize..7, k in 1usize..3) {
        prop_assume!(hw >= k);
        let mut rng = oracle::Lcg::new(seed);
        let xs = [n, c, hw, hw];
        let x = values(&mut rng, n * c * hw * hw);
        check(
            vec![(xs.to_vec(), x.clone())],
            &mut rng,
            |a| oracle::maxpool2d(&a[0], xs, k, k).0,
            |g, v| g.maxpool2d(v[0], k, k).unwrap(),
        )?;
        check(
            vec![(xs.to_vec(), x)],
            &mut rng,
            |a| oracle::avgpool2d(&a[0], xs, k, k).0,
            |g, v| g.avgpool2d(v[0], k, k).unwrap(),
        )?;
    }

    #[test]
    fn cross_entropy_matches_reference(seed in any::<u64>(), n in 1usize..6, k in 2usize..8) {
        let mut rng = oracle::Lcg::new(seed);
        let logits: Vec<f64> = values(&mut rng, n * k).iter().map(|v| (3.0 * v) as f32 as f64).collect();
        let labels: Vec<usize> = (0..n).map(|i| (seed as usize).wrapping_add(i * 7) % k).collect();
        check(
            vec![(vec![n, k], logits)],
            &mut rng,
            |a| vec![oracle::softmax_cross_entropy(&a[0], k, &labels)],
            |g, v| g.softmax_cross_entropy(v[0], &labels).unwrap(),
        )?;
    }

    #[test]
    fn tsb_matches_reference(seed in any::<u64>(), n in 1usize..3, c in 1usize..8, t in 1usize..4, depth in 1usize..3, hw in 1usize..4) {
        let mut rng = oracle::Lcg::new(seed);
        let vs = [n, c, hw, hw];
        let mut inputs = vec![(vs.to_vec(), values(&mut rng, n * c * hw * hw))];
        for _ in 0..depth {
            inputs.push((vec![t, t, 1, 1], values(&mut rng, t * t)));
        }
        check(
            inputs,
            &mut rng,
            |a| oracle::tsb_apply(&a[0], vs, &a[1..], t),
            |g, v| apply_in_graph(g, v[0], &v[1..]).unwrap(),
        )?;
    }
}
