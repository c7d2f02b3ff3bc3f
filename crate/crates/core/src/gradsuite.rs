//! The finite-difference gradient suite behind `fusionlab gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::SourceTag;
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig, FusionKind, FusionSteps, Masking, MhsaConfig, SeConfig};
use crate::nn::{
    check_module, probe_sum, EncoderBlock, LayerNorm, Linear, MhsaLayer, Mlp2, ParamStore,
};
use crate::sumoco::{focal_on_tape, info_nce_on_tape, ContrastQueue, SuMoCoConfig};
use crate::tensor::{check_inputs, CustomBackward, GradReport, Reduce, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Ops,
    Fusion,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuiteOptions {
    pub h: f64,
    pub tol: f64,
    /// Adds an op whose backward has a flipped sign, as a negative control.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            h: 1e-5,
            tol: 1e-6,
            inject_fault: false,
        }
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

fn arg(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(shape, rng, -1.0, 1.0).with_grad()
}

/// Values bounded away from zero with random sign, so kinks stay out of reach of `h`.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = random(shape, rng, 0.1, 1.0);
    t.data_mut().iter_mut().for_each(|v| {
        if rng.random_bool(0.5) {
            *v = -*v
        }
    });
    t.with_grad()
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(shape, rng, 0.5, 2.0).with_grad()
}

fn weighted_sum(t: &mut Tape, v: Var) -> Result<Var> {
    let n = t.value(v).len();
    let w: Vec<f64> = (0..n).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
    let shape = t.shape(v).to_vec();
    let w = t.constant(&shape, w)?;
    let p = t.mul(v, w)?;
    Ok(t.sum_all(p))
}

struct FlippedScale;

impl CustomBackward for FlippedScale {
    fn name(&self) -> &str {
        "faulty_scale"
    }

    fn backward(&self, out_grad: &[f64], _inputs: &[&[f64]], _output: &[f64]) -> Vec<Vec<f64>> {
        vec![out_grad.iter().map(|g| -2.0 * g).collect()]
    }
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn op_cases(rng: &mut ChaCha8Rng, inject_fault: bool) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let mut c: Vec<(&'static str, OpFn, Vec<Tensor>)> = Vec::new();
    macro_rules! case {
        ($name:expr, $inputs:expr, |$t:ident, $v:ident| $body:expr) => {
            c.push((
                $name,
                Box::new(move |$t: &mut Tape, $v: &[Var]| -> Result<Var> {
                    let y = $body;
                    weighted_sum($t, y)
                }),
                $inputs,
            ));
        };
    }
    case!("add", vec![arg(&[3, 4], rng), arg(&[3, 4], rng)], |t, v| t
        .add(v[0], v[1])?);
    case!(
        "add_broadcast",
        vec![arg(&[2, 3, 4], rng), arg(&[4], rng)],
        |t, v| t.add(v[0], v[1])?
    );
    case!("sub", vec![arg(&[3, 4], rng), arg(&[1, 4], rng)], |t, v| t
        .sub(v[0], v[1])?);
    case!("mul", vec![arg(&[2, 5], rng), arg(&[2, 5], rng)], |t, v| t
        .mul(v[0], v[1])?);
    case!(
        "div",
        vec![arg(&[2, 5], rng), positive(&[2, 5], rng)],
        |t, v| t.div(v[0], v[1])?
    );
    case!("relu", vec![off_zero(&[3, 4], rng)], |t, v| t.relu(v[0]));
    case!("sigmoid", vec![arg(&[3, 4], rng)], |t, v| t.sigmoid(v[0]));
    case!("exp", vec![arg(&[3, 4], rng)], |t, v| t.exp(v[0]));
    case!("log", vec![positive(&[3, 4], rng)], |t, v| t.log(v[0]));
    case!("scale", vec![arg(&[3, 4], rng)], |t, v| t.scale(v[0], -1.7));
    case!("add_scalar", vec![arg(&[3, 4], rng)], |t, v| t
        .add_scalar(v[0], 0.3));
    case!(
        "matmul",
        vec![arg(&[3, 4], rng), arg(&[4, 2], rng)],
        |t, v| t.matmul(v[0], v[1])?
    );
    case!("transpose", vec![arg(&[3, 4], rng)], |t, v| t
        .transpose(v[0])?);
    case!("softmax", vec![arg(&[3, 4], rng)], |t, v| t
        .softmax(v[0], 1)?);
    case!(
        "conv3d",
        vec![
            arg(&[2, 3, 4, 4], rng),
            arg(&[2, 2, 3, 3, 3], rng),
            arg(&[2], rng)
        ],
        |t, v| t.conv3d(v[0], v[1], Some(v[2]), [1, 2, 2], [1, 1, 1])?
    );
    case!("reduce_sum", vec![arg(&[2, 3, 4], rng)], |t, v| t.reduce(
        Reduce::Sum,
        v[0],
        &[1]
    )?);
    case!("reduce_mean", vec![arg(&[2, 3, 4], rng)], |t, v| t.reduce(
        Reduce::Mean,
        v[0],
        &[0, 2]
    )?);
    case!("reduce_max", vec![arg(&[3, 5], rng)], |t, v| t.reduce(
        Reduce::Max,
        v[0],
        &[1]
    )?);
    case!("sum_all", vec![arg(&[3, 4], rng)], |t, v| {
        let y = t.sum_all(v[0]);
        t.mul(y, y)?
    });
    case!("avg_pool_global", vec![arg(&[3, 2, 2, 2], rng)], |t, v| t
        .avg_pool_global(
        v[0]
    )?);
    case!("reshape", vec![arg(&[2, 6], rng)], |t, v| t
        .reshape(v[0], &[3, 4])?);
    case!(
        "concat",
        vec![arg(&[2, 3], rng), arg(&[2, 2], rng)],
        |t, v| t.concat(&[v[0], v[1]], 1)?
    );
    case!("narrow", vec![arg(&[3, 5], rng)], |t, v| t
        .narrow(v[0], 1, 1, 3)?);
    case!("gather_rows", vec![arg(&[4, 3], rng)], |t, v| t
        .gather_rows(v[0], &[3, 0, 0, 2])?);
    case!("scatter_rows", vec![arg(&[3, 2], rng)], |t, v| t
        .scatter_rows(v[0], &[4, 0, 2], 5)?);
    case!(
        "mul_rows",
        vec![arg(&[3, 2, 2], rng), arg(&[3], rng)],
        |t, v| t.mul_rows(v[0], v[1])?
    );
    case!(
        "add_rows",
        vec![arg(&[3, 2, 2], rng), arg(&[3], rng)],
        |t, v| t.add_rows(v[0], v[1])?
    );
    case!("row_norm", vec![arg(&[3, 5], rng)], |t, v| t
        .row_norm(v[0], 1e-5)?);
    case!("l2_normalize", vec![arg(&[6], rng)], |t, v| t
        .l2_normalize(v[0]));

    let mut qrng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut queue = ContrastQueue::new(16, 5);
    for j in 0..8 {
        let mut k: Vec<f64> = (0..5).map(|_| qrng.random_range(-1.0..1.0)).collect();
        let n = k.iter().map(|x| x * x).sum::<f64>().sqrt();
        k.iter_mut().for_each(|x| *x /= n);
        queue.push(&[k], &[j % 3]).expect("unit key");
    }
    let cfg = SuMoCoConfig {
        temperature: 0.5,
        ..SuMoCoConfig::default()
    };
    c.push((
        "info_nce",
        Box::new(move |t, v| {
            let z = t.l2_normalize(v[0]);
            Ok(info_nce_on_tape(t, z, 1, &queue, &cfg)?.0)
        }),
        vec![arg(&[5], rng)],
    ));
    c.push((
        "focal_loss",
        Box::new(|t, v| Ok(focal_on_tape(t, v[0], 2, 0.8, 2.0, 1.0)?.0)),
        vec![arg(&[4], rng)],
    ));
    if inject_fault {
        c.push((
            "faulty_scale",
            Box::new(|t, v| {
                let value = t.value(v[0]).iter().map(|x| 2.0 * x).collect();
                let shape = t.shape(v[0]).to_vec();
                let y = t.custom(&[v[0]], &shape, value, Box::new(FlippedScale))?;
                weighted_sum(t, y)
            }),
            vec![arg(&[3], rng)],
        ));
    }
    c
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, amp: f64) {
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v += rng.random_range(-amp..amp));
    }
}

fn layer_cases(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    let (h, tol) = (opts.h, opts.tol);

    let mut st = ParamStore::new(0);
    let lin = Linear::new(&mut st, "linear", 4, 3, rng);
    out.push(check_module(
        "linear",
        &[st],
        &[arg(&[2, 4], rng)],
        |s, v| {
            let y = lin.forward(s, v[0])?;
            probe_sum(s, y)
        },
        h,
        tol,
    )?);

    let mut st = ParamStore::new(0);
    let mlp = Mlp2::new(&mut st, "mlp", [4, 5, 3], rng);
    jitter(&mut st, rng, 0.1);
    out.push(check_module(
        "mlp2",
        &[st],
        &[arg(&[4], rng)],
        |s, v| {
            let y = mlp.forward(s, v[0])?;
            probe_sum(s, y)
        },
        h,
        tol,
    )?);

    let mut st = ParamStore::new(0);
    let ln = LayerNorm::new(&mut st, "ln", 5);
    jitter(&mut st, rng, 0.3);
    out.push(check_module(
        "layer_norm",
        &[st],
        &[arg(&[3, 5], rng)],
        |s, v| {
            let y = ln.forward(s, v[0])?;
            probe_sum(s, y)
        },
        h,
        tol,
    )?);

    let mut st = ParamStore::new(0);
    let att = MhsaLayer::new(&mut st, "attn", 4, 2, rng)?;
    out.push(check_module(
        "mhsa_layer",
        &[st],
        &[arg(&[3, 4], rng)],
        |s, v| {
            let y = att.forward(s, v[0])?;
            probe_sum(s, y)
        },
        h,
        tol,
    )?);

    let mut st = ParamStore::new(0);
    let block = EncoderBlock::new(&mut st, "block", 4, 2, rng)?;
    jitter(&mut st, rng, 0.1);
    out.push(check_module(
        "encoder_block",
        &[st],
        &[arg(&[3, 4], rng)],
        |s, v| {
            let y = block.forward(s, v[0])?;
            probe_sum(s, y)
        },
        h,
        tol,
    )?);

    let mut st = ParamStore::new(0);
    let cfg = BackboneConfig {
        stage_channels: vec![2, 2],
        stage_strides: vec![[1, 2, 2], [2, 1, 1]],
        ..BackboneConfig::default()
    };
    let bb = Backbone::new(&mut st, "backbone", &cfg, rng)?;
    jitter(&mut st, rng, 0.1);
    out.push(check_module(
        "backbone",
        &[st],
        &[arg(&[1, 2, 4, 4], rng)],
        |s, v| {
            let m = bb.extract(s, v[0], 0)?;
            probe_sum(s, m.data)
        },
        h,
        tol,
    )?);
    Ok(out)
}

fn fusion_cases(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<Vec<GradReport>> {
    let sources = SourceTag::all();
    let geometry = [4, 1, 1, 2];
    let mut out = Vec::new();
    for kind in FusionKind::ALL {
        for (steps, label) in [
            (FusionSteps::OneStep, "one_step"),
            (FusionSteps::TwoStep, "two_step"),
        ] {
            let cfg = FusionConfig {
                kind,
                steps,
                se: SeConfig { rho: 2 },
                mhsa: MhsaConfig {
                    heads: 2,
                    blocks: 1,
                },
                ..FusionConfig::default()
            };
            let mut st = ParamStore::new(0);
            let fusion = Fusion::new(&mut st, &cfg, &sources, geometry, rng)?;
            jitter(&mut st, rng, 0.2);
            let maps: Vec<Tensor> = (0..4).map(|_| arg(&geometry, rng)).collect();
            let name = format!("fusion.{}.{label}", kind.name());
            let mut r = check_module(
                &name,
                &[st],
                &maps,
                |s, v| {
                    let g = fusion.forward(s, v, Masking::Off)?;
                    probe_sum(s, g)
                },
                opts.h,
                opts.tol,
            )?;
            r.op_name = name;
            out.push(r);
        }
    }
    Ok(out)
}

/// One end-to-end encoder: two backbones, MHSA fusion, projection, normalization.
fn encoder_case(rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<GradReport> {
    let sources = vec![SourceTag::all()[0], SourceTag::all()[2]];
    let cfg = BackboneConfig {
        stage_channels: vec![2, 4],
        stage_strides: vec![[1, 2, 2], [2, 1, 1]],
        ..BackboneConfig::default()
    };
    let mut st = ParamStore::new(0);
    let bbs: Vec<Backbone> = (0..2)
        .map(|i| Backbone::new(&mut st, &format!("backbone{i}"), &cfg, rng))
        .collect::<Result<_>>()?;
    let geometry = cfg.output_shape([2, 4, 4])?;
    let fcfg = FusionConfig {
        mhsa: MhsaConfig {
            heads: 2,
            blocks: 1,
        },
        ..FusionConfig::default()
    };
    let fusion = Fusion::new(&mut st, &fcfg, &sources, geometry, rng)?;
    let proj = Mlp2::new(&mut st, "projection", [geometry[0], geometry[0], 3], rng);
    jitter(&mut st, rng, 0.1);
    let clips: Vec<Tensor> = (0..2).map(|_| arg(&[1, 2, 4, 4], rng)).collect();
    check_module(
        "encoder_end_to_end",
        &[st],
        &clips,
        |s, v| {
            let maps = bbs
                .iter()
                .zip(v)
                .enumerate()
                .map(|(i, (b, &c))| b.extract(s, c, i).map(|m| m.data))
                .collect::<Result<Vec<_>>>()?;
            let g = fusion.forward(s, &maps, Masking::Off)?;
            let p = proj.forward(s, g)?;
            let z = s.tape.l2_normalize(p);
            probe_sum(s, z)
        },
        opts.h,
        opts.tol,
    )
}

/// Runs the suite for `scope`; every checked op appears exactly once.
pub fn run_suite(scope: Scope, opts: &SuiteOptions) -> Result<Vec<GradReport>> {
    if !(opts.h > 0.0 && opts.tol > 0.0) {
        return Err(Error::Config("step and tolerance must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut reports = Vec::new();
    if matches!(scope, Scope::Ops | Scope::Full) {
        for (name, f, inputs) in op_cases(&mut rng, opts.inject_fault) {
            reports.push(check_inputs(name, f, &inputs, opts.h, opts.tol)?);
        }
        reports.extend(layer_cases(&mut rng, opts)?);
    }
    if matches!(scope, Scope::Fusion | Scope::Full) {
        reports.extend(fusion_cases(&mut rng, opts)?);
    }
    if scope == Scope::Full {
        reports.push(encoder_case(&mut rng, opts)?);
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn ops_scope_passes_and_names_are_unique() {
        let r = run_suite(Scope::Ops, &SuiteOptions::default()).unwrap();
        let failed: Vec<_> = r.iter().filter(|x| !x.passed).collect();
        assert!(failed.is_empty(), "{failed:?}");
        let names: HashSet<_> = r.iter().map(|x| x.op_name.clone()).collect();
        assert_eq!(names.len(), r.len());
        assert!(names.contains("conv3d") && names.contains("info_nce"));
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = SuiteOptions {
            inject_fault: true,
            ..SuiteOptions::default()
        };
        let r = run_suite(Scope::Ops, &opts).unwrap();
        let bad: Vec<_> = r
            .iter()
            .filter(|x| !x.passed)
            .map(|x| x.op_name.as_str())
            .collect();
        assert_eq!(bad, vec!["faulty_scale"]);
    }
}
