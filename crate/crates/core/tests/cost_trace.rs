//! The analytic cost walker against costs recorded during a real forward.

use ::logonet::autograd::{Ctx, ParamStore};
use ::logonet::logonet::{LoGoNet, LoGoNetConfig};
use ::logonet::perf::{count_model, lka_block_macs, Walker};
use ::logonet::rng::{normal_tensor, substream};

fn traced(cfg: &LoGoNetConfig, shape: [usize; 5]) -> (u64, u64, u64, u64) {
    let mut store = ParamStore::<f32>::new();
    let net = LoGoNet::new(&mut store, cfg, &mut substream(0, "init", 0)).unwrap();
    let report = count_model(&net, shape).unwrap();
    let mut ctx = Ctx::new(&mut store, true);
    ctx.tape.enable_trace();
    let x = ctx.input(normal_tensor(shape, 0.0, 1.0, &mut substream(0, "x", 0)));
    net.forward(&mut ctx, x).unwrap();
    let trace = ctx.tape.trace().unwrap();
    let macs = trace.iter().map(|t| t.macs).sum();
    let elementwise = trace
        .iter()
        .filter(|t| t.kind == "batchnorm" || t.kind == "activation")
        .map(|t| t.elementwise)
        .sum();
    (macs, report.totals.macs, elementwise, report.totals.elementwise)
}

#[test]
fn walker_matches_trace_shared_local() {
    let (tm, wm, te, we) = traced(&LoGoNetConfig::tiny(3), [2, 1, 16, 16, 16]);
    assert_eq!(tm, wm);
    assert_eq!(te, we);
}

#[test]
fn walker_matches_trace_per_cube_local() {
    let cfg = LoGoNetConfig {
        share_local: false,
        ..LoGoNetConfig::tiny(2)
    };
    let (tm, wm, te, we) = traced(&cfg, [1, 1, 32, 32, 32]);
    assert_eq!(tm, wm);
    assert_eq!(te, we);
}

#[test]
fn walker_matches_trace_global_only() {
    let cfg = LoGoNetConfig {
        use_local: false,
        ..LoGoNetConfig::tiny(3)
    };
    let (tm, wm, te, we) = traced(&cfg, [1, 1, 32, 32, 32]);
    assert_eq!(tm, wm);
    assert_eq!(te, we);
}

#[test]
fn block_closed_form_matches_walker() {
    use ::logonet::blocks::{LkaBlock, LkaKernels};
    let mut store = ParamStore::<f32>::new();
    for (c, r, sp) in [(8usize, 4usize, [4usize, 4, 4]), (16, 2, [2, 6, 4]), (24, 8, [3, 3, 3])] {
        let b = LkaBlock::new(&mut store, &format!("b{c}"), c, r, LkaKernels::default(), &mut substream(0, "init", c as u64)).unwrap();
        let mut w = Walker::new();
        w.lka_block("b", &b, [1, c, sp[0], sp[1], sp[2]]).unwrap();
        let walked: u64 = w.rows().iter().map(|row| row.macs).sum();
        assert_eq!(walked, lka_block_macs(c, r, LkaKernels::default(), sp));
    }
}
